#pragma once

// Feedforward MLPs over a flat parameter vector.
//
// Packing order is layer-major; within a layer the weight matrix W (out x in)
// is stored row-major, followed by the bias vector b (out) when the layer has
// one. Each layer computes l_i = nl_i(W_i l_{i-1} + b_i).

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"

namespace bnn {

enum class Activation { Identity, Relu, LeakyRelu, Tanh, Softmax };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::LeakyRelu: return "leaky-relu";
    case Activation::Tanh: return "tanh";
    case Activation::Softmax: return "softmax";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity" || s == "linear") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "leaky-relu" || s == "leaky_relu") return Activation::LeakyRelu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "softmax") return Activation::Softmax;
  throw ContractViolation("unsupported activation '" + s + "'");
}

struct LayerSpec {
  std::size_t input_width = 1;
  std::size_t output_width = 1;
  Activation activation = Activation::Identity;
  double slope = 0.01;  // leaky-relu only
  bool bias = true;

  std::size_t param_count() const { return input_width * output_width + (bias ? output_width : 0); }
  bool positively_homogeneous() const {
    return activation == Activation::Relu || activation == Activation::LeakyRelu ||
           activation == Activation::Identity;
  }
};

class MLPSpec {
 public:
  MLPSpec() = default;
  explicit MLPSpec(std::vector<LayerSpec> layers) : layers_(std::move(layers)) { validate(); }

  // Convenience: widths {2,16,1} with one activation for hidden layers and
  // another for the output layer.
  static MLPSpec chain(const std::vector<std::size_t>& widths, Activation hidden,
                       Activation output = Activation::Identity) {
    detail::require(widths.size() >= 2, "MLPSpec::chain needs at least two widths");
    std::vector<LayerSpec> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      LayerSpec l;
      l.input_width = widths[i];
      l.output_width = widths[i + 1];
      l.activation = i + 2 == widths.size() ? output : hidden;
      layers.push_back(l);
    }
    return MLPSpec(std::move(layers));
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t depth() const { return layers_.size(); }
  std::size_t input_width() const { return layers_.front().input_width; }
  std::size_t output_width() const { return layers_.back().output_width; }
  bool softmax_output() const { return layers_.back().activation == Activation::Softmax; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.param_count();
    return n;
  }
  // Offset of layer i's first parameter in the packed vector.
  std::size_t layer_offset(std::size_t i) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < i; ++k) n += layers_[k].param_count();
    return n;
  }

  bool operator==(const MLPSpec& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& a = layers_[i];
      const auto& b = o.layers_[i];
      if (a.input_width != b.input_width || a.output_width != b.output_width ||
          a.activation != b.activation || a.bias != b.bias ||
          (a.activation == Activation::LeakyRelu && a.slope != b.slope))
        return false;
    }
    return true;
  }

 private:
  void validate() const {
    detail::require(!layers_.empty(), "MLPSpec: at least one layer required");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      detail::require(l.input_width >= 1 && l.output_width >= 1, "MLPSpec: widths must be >= 1");
      if (l.activation == Activation::LeakyRelu)
        detail::require(l.slope > 0 && l.slope < 1, "MLPSpec: leaky-relu slope must lie in (0,1)");
      if (l.activation == Activation::Softmax)
        detail::require(i + 1 == layers_.size(), "MLPSpec: softmax allowed only on the last layer");
      if (i + 1 < layers_.size())
        detail::require(l.output_width == layers_[i + 1].input_width,
                        "MLPSpec: adjacent layer widths do not chain");
    }
  }

  std::vector<LayerSpec> layers_;
};

inline nlohmann::json to_json(const MLPSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers()) {
    nlohmann::json j = {{"in", l.input_width}, {"out", l.output_width}, {"act", to_string(l.activation)}};
    if (l.activation == Activation::LeakyRelu) j["slope"] = l.slope;
    if (!l.bias) j["bias"] = false;
    layers.push_back(j);
  }
  return {{"layers", layers}};
}

inline MLPSpec mlp_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("layers") || !j.at("layers").is_array())
    throw ConfigError("network spec: expected {\"layers\":[...]}");
  for (const auto& [key, _] : j.items())
    if (key != "layers") throw ConfigError("network spec: unknown key '" + key + "'");
  std::vector<LayerSpec> layers;
  for (const auto& lj : j.at("layers")) {
    for (const auto& [key, _] : lj.items())
      if (key != "in" && key != "out" && key != "act" && key != "slope" && key != "bias")
        throw ConfigError("network layer: unknown key '" + key + "'");
    LayerSpec l;
    l.input_width = lj.at("in").get<std::size_t>();
    l.output_width = lj.at("out").get<std::size_t>();
    l.activation = activation_from_string(lj.value("act", std::string("identity")));
    l.slope = lj.value("slope", 0.01);
    l.bias = lj.value("bias", true);
    layers.push_back(l);
  }
  try {
    return MLPSpec(std::move(layers));
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
}

// θ together with the architecture it parametrizes.
class ParamVector {
 public:
  ParamVector(std::shared_ptr<const MLPSpec> spec, Vector values)
      : spec_(std::move(spec)), values_(std::move(values)) {
    detail::require(spec_ != nullptr, "ParamVector: null spec");
    detail::require(values_.size() == spec_->param_count(),
                    "ParamVector: length does not match the network's parameter count");
  }
  ParamVector(const MLPSpec& spec, Vector values)
      : ParamVector(std::make_shared<const MLPSpec>(spec), std::move(values)) {}

  static ParamVector zeros(const MLPSpec& spec) { return ParamVector(spec, Vector(spec.param_count(), 0.0)); }

  const MLPSpec& spec() const { return *spec_; }
  std::shared_ptr<const MLPSpec> spec_ptr() const { return spec_; }
  const Vector& values() const { return values_; }
  Vector& values() { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

 private:
  std::shared_ptr<const MLPSpec> spec_;
  Vector values_;
};

// Dense network persistence: {"spec": ..., "theta": [...]}.
inline nlohmann::json to_json(const ParamVector& theta) {
  return {{"spec", to_json(theta.spec())}, {"theta", theta.values()}};
}

inline ParamVector param_vector_from_json(const nlohmann::json& j) {
  MLPSpec spec = mlp_spec_from_json(j.at("spec"));
  Vector v = j.at("theta").get<Vector>();
  if (v.size() != spec.param_count()) throw ConfigError("network JSON: theta length does not match spec");
  return ParamVector(std::move(spec), std::move(v));
}

struct LayerParams {
  Tensor weights;  // out x in
  Vector bias;     // empty when the layer has no bias
};

inline std::vector<LayerParams> unpack(const MLPSpec& spec, std::span<const double> theta) {
  detail::require(theta.size() == spec.param_count(), "unpack: parameter length mismatch");
  std::vector<LayerParams> out;
  std::size_t off = 0;
  for (const auto& l : spec.layers()) {
    const std::size_t nw = l.input_width * l.output_width;
    LayerParams p;
    p.weights = Tensor::matrix(l.output_width, l.input_width, Vector(theta.begin() + off, theta.begin() + off + nw));
    off += nw;
    if (l.bias) {
      p.bias.assign(theta.begin() + off, theta.begin() + off + l.output_width);
      off += l.output_width;
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline Vector pack(const MLPSpec& spec, const std::vector<LayerParams>& layers) {
  detail::require(layers.size() == spec.depth(), "pack: layer count mismatch");
  Vector theta;
  theta.reserve(spec.param_count());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = spec.layer(i);
    detail::require(layers[i].weights.size() == l.input_width * l.output_width, "pack: weight shape mismatch");
    detail::require(layers[i].bias.size() == (l.bias ? l.output_width : 0), "pack: bias shape mismatch");
    theta.insert(theta.end(), layers[i].weights.values.begin(), layers[i].weights.values.end());
    theta.insert(theta.end(), layers[i].bias.begin(), layers[i].bias.end());
  }
  return theta;
}

namespace detail {

inline void apply_activation(const LayerSpec& l, std::span<double> z) {
  switch (l.activation) {
    case Activation::Identity: break;
    case Activation::Relu: for (double& v : z) v = v > 0 ? v : 0.0; break;
    case Activation::LeakyRelu: for (double& v : z) v = v > 0 ? v : l.slope * v; break;
    case Activation::Tanh: for (double& v : z) v = std::tanh(v); break;
    case Activation::Softmax: {
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (double& v : z) {
        v = std::exp(v - mx);
        s += v;
      }
      for (double& v : z) v /= s;
      break;
    }
  }
}

}  // namespace detail

enum class OutputMode { Activated, Logits };

// Optional per-layer multiplicative masks over each layer's input units
// (W_i diag(z_i)). An empty mask vector leaves that layer dense.
using LayerMasks = std::vector<Vector>;

inline Vector forward(const MLPSpec& spec, std::span<const double> theta, std::span<const double> x,
                      OutputMode mode = OutputMode::Activated, const LayerMasks* masks = nullptr) {
  detail::require(theta.size() == spec.param_count(), "forward: parameter length mismatch");
  detail::require(x.size() == spec.input_width(), "forward: input width mismatch");
  Vector cur(x.begin(), x.end());
  std::size_t off = 0;
  for (std::size_t i = 0; i < spec.depth(); ++i) {
    const auto& l = spec.layer(i);
    const Vector* mask = (masks && i < masks->size() && !(*masks)[i].empty()) ? &(*masks)[i] : nullptr;
    if (mask) detail::require(mask->size() == l.input_width, "forward: mask width mismatch");
    Vector next(l.output_width, 0.0);
    for (std::size_t r = 0; r < l.output_width; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < l.input_width; ++c) {
        const double w = theta[off + r * l.input_width + c] * (mask ? (*mask)[c] : 1.0);
        s += w * cur[c];
      }
      next[r] = s;
    }
    off += l.input_width * l.output_width;
    if (l.bias) {
      for (std::size_t r = 0; r < l.output_width; ++r) next[r] += theta[off + r];
      off += l.output_width;
    }
    const bool last = i + 1 == spec.depth();
    if (!(last && mode == OutputMode::Logits && l.activation == Activation::Softmax))
      detail::apply_activation(l, next);
    cur = std::move(next);
  }
  return cur;
}

inline Vector forward(const ParamVector& theta, std::span<const double> x,
                      OutputMode mode = OutputMode::Activated) {
  return forward(theta.spec(), theta.values(), x, mode);
}

// Batched forward on a tape: inputs is (n x in), result is (n x out). A
// softmax output layer is left as logits unless apply_softmax is set.
inline Var forward_tape(const MLPSpec& spec, Var theta, Var inputs, const LayerMasks* masks = nullptr,
                        bool apply_softmax = false) {
  Tape& tape = *theta.tape;
  Var cur = inputs;
  std::size_t off = 0;
  for (std::size_t i = 0; i < spec.depth(); ++i) {
    const auto& l = spec.layer(i);
    Var w = tape.slice(theta, off, {l.output_width, l.input_width});
    off += l.input_width * l.output_width;
    if (masks && i < masks->size() && !(*masks)[i].empty()) {
      detail::require((*masks)[i].size() == l.input_width, "forward_tape: mask width mismatch");
      w = w * tape.constant(Tensor::vector((*masks)[i]));
    }
    Var z = matmul(cur, transpose(w));
    if (l.bias) {
      z = z + tape.slice(theta, off, {l.output_width});
      off += l.output_width;
    }
    switch (l.activation) {
      case Activation::Identity: break;
      case Activation::Relu: z = relu(z); break;
      case Activation::LeakyRelu: z = leaky_relu(z, l.slope); break;
      case Activation::Tanh: z = tanh(z); break;
      case Activation::Softmax:
        if (apply_softmax) z = exp(log_softmax_rows(z));
        break;
    }
    cur = z;
  }
  return cur;
}

inline Tensor rows_to_tensor(const std::vector<Vector>& rows) {
  detail::require(!rows.empty(), "rows_to_tensor: no rows");
  const std::size_t c = rows.front().size();
  Vector v;
  v.reserve(rows.size() * c);
  for (const auto& r : rows) {
    detail::require(r.size() == c, "rows_to_tensor: ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor::matrix(rows.size(), c, std::move(v));
}

// ---- parameter-space symmetries ----

inline ParamVector permute_hidden_units(const ParamVector& theta, std::size_t layer,
                                        const std::vector<std::size_t>& permutation) {
  const MLPSpec& spec = theta.spec();
  detail::require(layer + 1 < spec.depth(), "permute_hidden_units: layer must be hidden");
  const std::size_t width = spec.layer(layer).output_width;
  detail::require(permutation.size() == width, "permute_hidden_units: permutation has wrong length");
  std::vector<bool> seen(width, false);
  for (std::size_t p : permutation) {
    detail::require(p < width && !seen[p], "permute_hidden_units: permutation is not a bijection");
    seen[p] = true;
  }
  auto layers = unpack(spec, theta.values());
  const LayerParams cur = layers[layer];
  const LayerParams nxt = layers[layer + 1];
  const std::size_t in = spec.layer(layer).input_width;
  const std::size_t out_next = spec.layer(layer + 1).output_width;
  for (std::size_t j = 0; j < width; ++j) {
    const std::size_t src = permutation[j];
    for (std::size_t c = 0; c < in; ++c) layers[layer].weights.at(j, c) = cur.weights.at(src, c);
    if (!cur.bias.empty()) layers[layer].bias[j] = cur.bias[src];
    for (std::size_t r = 0; r < out_next; ++r) layers[layer + 1].weights.at(r, j) = nxt.weights.at(r, src);
  }
  return ParamVector(theta.spec_ptr(), pack(spec, layers));
}

// W_layer, b_layer scaled by alpha and W_{layer+1} by 1/alpha. The network
// function is unchanged only for positively homogeneous activations.
inline ParamVector scale_layers(const ParamVector& theta, std::size_t layer, double alpha) {
  const MLPSpec& spec = theta.spec();
  detail::require(alpha > 0, "scale_layers: alpha must be positive");
  detail::require(layer + 1 < spec.depth(), "scale_layers: next layer must exist");
  auto layers = unpack(spec, theta.values());
  for (double& w : layers[layer].weights.values) w *= alpha;
  for (double& b : layers[layer].bias) b *= alpha;
  for (double& w : layers[layer + 1].weights.values) w /= alpha;
  return ParamVector(theta.spec_ptr(), pack(spec, layers));
}

// Sorts the units of every hidden layer by ascending bias, ties broken by the
// first entry of the unit's weight row, then by original index.
inline ParamVector canonicalize(const ParamVector& theta) {
  ParamVector cur = theta;
  const MLPSpec& spec = theta.spec();
  for (std::size_t layer = 0; layer + 1 < spec.depth(); ++layer) {
    const auto layers = unpack(spec, cur.values());
    const auto& p = layers[layer];
    const std::size_t width = spec.layer(layer).output_width;
    std::vector<std::size_t> perm(width);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
      const double ba = p.bias.empty() ? 0.0 : p.bias[a];
      const double bb = p.bias.empty() ? 0.0 : p.bias[b];
      if (ba != bb) return ba < bb;
      return p.weights.at(a, 0) < p.weights.at(b, 0);
    });
    cur = permute_hidden_units(cur, layer, perm);
  }
  return cur;
}

// Fan-in scaled normal initialization (std = 1/sqrt(fan_in)); biases start at zero.
template <typename Rng>
Vector init_params(const MLPSpec& spec, Rng& rng) {
  Vector theta;
  theta.reserve(spec.param_count());
  for (const auto& l : spec.layers()) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(l.input_width));
    for (std::size_t k = 0; k < l.input_width * l.output_width; ++k) theta.push_back(rng.normal(0.0, sd));
    if (l.bias) theta.insert(theta.end(), l.output_width, 0.0);
  }
  return theta;
}

}  // namespace bnn
