#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bnn/error.hpp"

namespace bnn::io {

// Shortest decimal text that round-trips to the same double.
inline std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Rows of numbers as CSV with an optional header line.
inline std::string matrix_csv(const std::vector<std::vector<double>>& rows, const std::vector<std::string>& header = {}) {
  std::string s;
  for (std::size_t i = 0; i < header.size(); ++i) s += (i ? "," : "") + header[i];
  if (!header.empty()) s += "\n";
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (j) s += ',';
      s += num(r[j]);
    }
    s += '\n';
  }
  return s;
}

inline std::vector<std::vector<double>> parse_matrix_csv(const std::string& text, bool has_header) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  if (has_header) std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t end = std::min(line.find(',', pos), line.size());
      double v = 0;
      const auto res = std::from_chars(line.data() + pos, line.data() + end, v);
      if (res.ec != std::errc() || res.ptr != line.data() + end) throw ConfigError("malformed number in CSV: " + line);
      r.push_back(v);
      pos = end + 1;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace bnn::io
