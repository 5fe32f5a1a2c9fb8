#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "chatnmt/params.hpp"

namespace chatnmt {

/// Adam optimizer state. Moments are keyed by parameter path and allocated
/// on first use, so the same state object survives parameters being added
/// (stage transitions create fresh states anyway).
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.998;
    double epsilon = 1e-9;
    int64_t step = 0;

    std::unordered_map<std::string, std::vector<double>> first_moment;
    std::unordered_map<std::string, std::vector<double>> second_moment;
};

/// One bias-corrected Adam update over every parameter, reading gradients
/// from the tensors' grad buffers. Throws TrainError naming the parameter if
/// any gradient element is non-finite.
void adam_step(ParamList& params, AdamState& state, double learning_rate);

/// Inverse-square-root warmup schedule:
///   lr(step) = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
/// with step counted from 1.
double transformer_lr(int64_t step, int d_model, int64_t warmup_steps, double scale = 1.0);

}  // namespace chatnmt
