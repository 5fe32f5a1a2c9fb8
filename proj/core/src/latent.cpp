#include "chatnmt/latent.hpp"

#include <cmath>

#include "chatnmt/error.hpp"
#include "chatnmt/init.hpp"

namespace chatnmt {

Tensor fan_uniform(int rows, int cols, Rng& rng) {
    double limit = std::sqrt(6.0 / (double(rows) + double(cols)));
    return Tensor::uniform({rows, cols}, -limit, limit, rng, /*requires_grad=*/true);
}

Tensor zero_param(int n) {
    return Tensor::zeros({n}, /*requires_grad=*/true);
}

std::string to_string(LatentKind k) {
    switch (k) {
        case LatentKind::role: return "role";
        case LatentKind::dia: return "dia";
        case LatentKind::tra: return "tra";
    }
    throw ContractError("unknown latent kind");
}

LatentKind latent_kind_from_string(const std::string& s) {
    if (s == "role") return LatentKind::role;
    if (s == "dia") return LatentKind::dia;
    if (s == "tra") return LatentKind::tra;
    throw ConfigError("unknown latent kind '" + s + "' (expected role, dia, or tra)");
}

bool LatentSet::has(LatentKind k) const {
    switch (k) {
        case LatentKind::role: return role;
        case LatentKind::dia: return dia;
        case LatentKind::tra: return tra;
    }
    return false;
}

void LatentSet::set(LatentKind k, bool on) {
    switch (k) {
        case LatentKind::role: role = on; break;
        case LatentKind::dia: dia = on; break;
        case LatentKind::tra: tra = on; break;
    }
}

std::vector<LatentKind> LatentSet::active() const {
    std::vector<LatentKind> out;
    for (LatentKind k : kAllLatentKinds)
        if (has(k)) out.push_back(k);
    return out;
}

LatentMlp init_latent_mlp(int in_width, int d, int d_z, Rng& rng) {
    if (in_width <= 0 || d <= 0 || d_z <= 0)
        throw ContractError("latent MLP dimensions must be positive");
    LatentMlp mlp;
    mlp.w1 = fan_uniform(d, in_width, rng);
    mlp.b1 = zero_param(d);
    mlp.w2 = fan_uniform(2 * d_z, d, rng);
    mlp.b2 = zero_param(2 * d_z);
    return mlp;
}

int prior_rep_count(LatentKind k) {
    switch (k) {
        case LatentKind::role: return 2;  // h_x, role-history summary
        case LatentKind::dia: return 2;   // h_x, source-context summary
        case LatentKind::tra: return 3;   // h_x, source- and target-context summaries
    }
    throw ContractError("unknown latent kind");
}

namespace {

GaussianParams mlp_forward(const LatentMlp& mlp, const std::vector<Tensor>& reps) {
    if (mlp.w1.rank() != 2 || mlp.w2.rank() != 2)
        throw ContractError("latent MLP weights must be rank-2");
    int in_width = mlp.w1.dim(1);
    int width = 0;
    for (const Tensor& r : reps) {
        if (r.rank() != 2) throw ShapeError("latent conditioning reps must be (batch, d)");
        width += r.dim(1);
    }
    if (width != in_width)
        throw ShapeError("latent conditioning width " + std::to_string(width) +
                         " does not match MLP input width " + std::to_string(in_width));
    Tensor x = reps.size() == 1 ? reps[0] : concat_last_dim(reps);
    Tensor h = tanh(add(matmul(x, mlp.w1, false, true), mlp.b1));
    Tensor o = add(matmul(h, mlp.w2, false, true), mlp.b2);
    int d_z = mlp.w2.dim(0) / 2;
    GaussianParams g;
    g.mu = slice_last_dim(o, 0, d_z);
    // Softplus keeps sigma positive everywhere; the floor keeps log sigma and
    // the KL denominator finite even when the raw activation is very negative.
    g.sigma = add_const(softplus(slice_last_dim(o, d_z, d_z)), 1e-6);
    return g;
}

}  // namespace

GaussianParams prior_forward(LatentKind kind, const LatentMlp& mlp,
                             const std::vector<Tensor>& reps) {
    int expected = prior_rep_count(kind);
    if (int(reps.size()) != expected)
        throw ContractError("prior for '" + to_string(kind) + "' expects " +
                            std::to_string(expected) + " conditioning reps, got " +
                            std::to_string(reps.size()));
    return mlp_forward(mlp, reps);
}

GaussianParams posterior_forward(LatentKind kind, const LatentMlp& mlp,
                                 const std::vector<Tensor>& reps, const Tensor& h_y) {
    int expected = prior_rep_count(kind);
    if (int(reps.size()) != expected)
        throw ContractError("posterior for '" + to_string(kind) + "' expects " +
                            std::to_string(expected) + " conditioning reps plus the target "
                            "summary, got " + std::to_string(reps.size()));
    std::vector<Tensor> all = reps;
    all.push_back(h_y);
    return mlp_forward(mlp, all);
}

Tensor sample_latent(const GaussianParams& params, const Tensor& noise) {
    if (noise.shape() != params.mu.shape())
        throw ShapeError("latent noise shape does not match mu");
    return add(params.mu, mul(params.sigma, noise));
}

Tensor kl_divergence(const GaussianParams& q, const GaussianParams& p) {
    if (q.mu.shape() != p.mu.shape() || q.sigma.shape() != p.sigma.shape())
        throw ShapeError("KL requires matching Gaussian shapes");
    Tensor diff = sub(q.mu, p.mu);
    Tensor qvar = mul(q.sigma, q.sigma);
    Tensor pvar = mul(p.sigma, p.sigma);
    Tensor ratio = div(add(qvar, mul(diff, diff)), scale(pvar, 2.0));
    Tensor log_term = sub(log(p.sigma), log(q.sigma));
    return sum_all(add_const(add(log_term, ratio), -0.5));
}

}  // namespace chatnmt
