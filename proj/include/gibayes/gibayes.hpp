#pragma once

#include "autodiff.hpp"
#include "bnn.hpp"
#include "conv.hpp"
#include "data.hpp"
#include "dgp.hpp"
#include "distributions.hpp"
#include "experiment.hpp"
#include "grad_check.hpp"
#include "harness.hpp"
#include "hmc.hpp"
#include "linalg.hpp"
#include "metrics.hpp"
#include "optim.hpp"
#include "priors.hpp"
#include "random.hpp"
#include "tensor.hpp"
