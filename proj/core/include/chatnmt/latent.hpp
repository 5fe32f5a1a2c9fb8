#pragma once

#include <array>
#include <string>
#include <vector>

#include "chatnmt/rng.hpp"
#include "chatnmt/tensor.hpp"

namespace chatnmt {

/// The three latent variables: speaker preference, dialogue coherence,
/// translation consistency.
enum class LatentKind { role, dia, tra };

inline constexpr std::array<LatentKind, 3> kAllLatentKinds = {LatentKind::role, LatentKind::dia,
                                                              LatentKind::tra};

std::string to_string(LatentKind k);
LatentKind latent_kind_from_string(const std::string& s);

/// Which latent variables a model carries. Ablations turn members off; a
/// disabled latent has no parameters, no KL term, and no fusion slot.
struct LatentSet {
    bool role = true;
    bool dia = true;
    bool tra = true;

    static LatentSet all() { return {}; }
    static LatentSet none() { return {false, false, false}; }

    bool has(LatentKind k) const;
    void set(LatentKind k, bool on);
    int count() const { return int(role) + int(dia) + int(tra); }
    std::vector<LatentKind> active() const;
    bool operator==(const LatentSet&) const = default;
};

/// Diagonal Gaussian over a batch: mu and sigma are (B, d_z), sigma > 0.
struct GaussianParams {
    Tensor mu;
    Tensor sigma;
};

/// Two-layer perceptron trunk emitting (mu, pre-sigma): hidden width d with
/// tanh, output width 2*d_z.
struct LatentMlp {
    Tensor w1;  // d x in_width
    Tensor b1;  // d
    Tensor w2;  // 2*d_z x d
    Tensor b2;  // 2*d_z
};

LatentMlp init_latent_mlp(int in_width, int d, int d_z, Rng& rng);

/// How many d-wide conditioning vectors the prior of each kind consumes
/// (role: current source + role history; dia: + dialogue history; tra: both
/// language sides). The posterior additionally appends the target summary.
int prior_rep_count(LatentKind k);

/// Runs the MLP on the concatenated reps. Throws ContractError when the rep
/// count does not match the kind's signature, ShapeError when widths do not
/// match the weights. sigma = softplus(raw) + 1e-6 keeps densities finite.
GaussianParams prior_forward(LatentKind kind, const LatentMlp& mlp,
                             const std::vector<Tensor>& reps);
GaussianParams posterior_forward(LatentKind kind, const LatentMlp& mlp,
                                 const std::vector<Tensor>& reps, const Tensor& h_y);

/// Reparameterized draw: z = mu + sigma * noise, differentiable in mu/sigma.
Tensor sample_latent(const GaussianParams& params, const Tensor& noise);

/// Closed-form KL(q || p) for diagonal Gaussians, summed over batch and
/// dimensions:  sum_i log(p.sigma/q.sigma) + (q.sigma^2 + (q.mu - p.mu)^2)
/// / (2 p.sigma^2) - 1/2.  Exactly zero when q and p coincide.
Tensor kl_divergence(const GaussianParams& q, const GaussianParams& p);

}  // namespace chatnmt
