#include "chatnmt/adam.hpp"

#include <cmath>

#include "chatnmt/error.hpp"

namespace chatnmt {

void zero_grads(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

double grad_global_norm(const ParamList& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    return std::sqrt(sq);
}

double clip_grads(ParamList& params, double max_norm) {
    const double norm = grad_global_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double& g : p.tensor.mutable_grad()) g *= s;
        }
    }
    return norm;
}

void adam_step(ParamList& params, AdamState& state, double learning_rate) {
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (auto& p : params) {
        auto& m = state.first_moment[p.name];
        auto& v = state.second_moment[p.name];
        if (m.empty()) m.assign(p.tensor.numel(), 0.0);
        if (v.empty()) v.assign(p.tensor.numel(), 0.0);
        if (m.size() != p.tensor.numel())
            throw TrainError("optimizer moment size " + std::to_string(m.size()) +
                                 " does not match parameter of " +
                                 std::to_string(p.tensor.numel()) + " elements",
                             p.name);
        // Parameters without a gradient this step (unused subgraph) keep
        // their values; their moments still decay.
        const bool has_g = p.tensor.has_grad();
        auto grad = p.tensor.grad();
        auto w = p.tensor.mutable_data();
        for (size_t i = 0; i < m.size(); ++i) {
            const double g = has_g ? grad[i] : 0.0;
            if (!std::isfinite(g))
                throw TrainError("non-finite gradient", p.name);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

double transformer_lr(int64_t step, int d_model, int64_t warmup_steps, double scale) {
    if (step < 1) step = 1;
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps);
    return scale * std::pow(static_cast<double>(d_model), -0.5) *
           std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

}  // namespace chatnmt
