#pragma once

// Everything in one include.

#include "bnn/error.hpp"
#include "bnn/random.hpp"
#include "bnn/io.hpp"
#include "bnn/autodiff.hpp"
#include "bnn/optim.hpp"
#include "bnn/network.hpp"
#include "bnn/model.hpp"
#include "bnn/data.hpp"
#include "bnn/mcmc.hpp"
#include "bnn/vi.hpp"
#include "bnn/approx.hpp"
#include "bnn/predictive.hpp"
#include "bnn/calibration.hpp"
#include "bnn/distill.hpp"
#include "bnn/runner.hpp"
