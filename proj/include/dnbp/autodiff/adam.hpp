#pragma once

#include <string>

#include "dnbp/autodiff/parameter.hpp"

namespace dnbp::ad {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamResult {
    bool applied = true;
    std::string diagnostic;
};

// Bias-corrected Adam update of every tensor in the block, then zeroes the
// gradients. A non-finite gradient anywhere in the block skips the update
// (moments and step counter untouched) and reports which tensor was bad.
AdamResult adam_step(ParameterBlock& block, const AdamConfig& cfg);

}  // namespace dnbp::ad
