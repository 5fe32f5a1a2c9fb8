#pragma once

#include "chatnmt/rng.hpp"
#include "chatnmt/tensor.hpp"

namespace chatnmt {

/// Fan-scaled uniform init for a (rows x cols) weight applied as x * W^T:
/// limit = sqrt(6 / (fan_in + fan_out)) with fan_in = cols, fan_out = rows.
/// The result carries gradients.
Tensor fan_uniform(int rows, int cols, Rng& rng);

/// Zero-initialized trainable vector of length n.
Tensor zero_param(int n);

}  // namespace chatnmt
