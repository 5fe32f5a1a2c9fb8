#pragma once

#include <string>
#include <vector>

#include "chatnmt/tensor.hpp"

namespace chatnmt {

/// A trainable tensor with its stable dotted path, e.g.
/// "encoder.layer0.self_attn.wq". Paths key the optimizer moments and the
/// checkpoint entries, so they must not change between runs.
struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

void zero_grads(ParamList& params);

/// L2 norm over the concatenation of all gradients (missing grads count as 0).
double grad_global_norm(const ParamList& params);

/// Scales all gradients down so the global norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grads(ParamList& params, double max_norm);

}  // namespace chatnmt
