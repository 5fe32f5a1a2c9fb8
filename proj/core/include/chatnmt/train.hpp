#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "chatnmt/batch.hpp"
#include "chatnmt/latent.hpp"
#include "chatnmt/model.hpp"

namespace chatnmt {

struct TrainConfig {
    int stage = 1;
    long max_steps = 100;
    int batch_tokens = 1024;      // per-batch source+target token budget
    long anneal_steps = 10000;    // KL multiplier ramp length
    LatentSet disabled = LatentSet::none();  // stage-2 ablation; ignored by stage 1
    int context_window = 3;
    unsigned long long seed = 1;
    long checkpoint_every = 0;    // 0 = final checkpoint only
    int warmup_steps = 4000;
    double lr_scale = 1.0;
    double clip_norm = 5.0;

    void validate() const;  // ConfigError on violations
};

/// One training step's observable numbers. kl_per_word holds exactly one
/// entry per active latent, in role-dia-tra order, each ≥ 0.
struct StepReport {
    long step = 0;
    double loss = 0.0;       // optimized objective
    double ce = 0.0;         // plain (unsmoothed) negative log-likelihood per token
    double lambda = 0.0;     // KL multiplier in effect
    double lr = 0.0;
    double grad_norm = 0.0;  // global norm before clipping
    long target_tokens = 0;
    double tokens_per_sec = 0.0;  // wall-clock rate; excluded from the log line
    std::vector<std::pair<LatentKind, double>> kl_per_word;

    /// Single-line JSON with deterministic key order. tokens_per_sec is
    /// deliberately omitted so identical (config, seed) runs log identically.
    std::string to_json_line() const;
};

/// Differentiable loss plus the already-extracted report numbers.
struct LossBreakdown {
    Tensor loss;
    double ce = 0.0;
    double lambda = 0.0;
    long target_tokens = 0;
    std::vector<std::pair<LatentKind, double>> kl_per_word;
};

/// KL multiplier: min(1, step / anneal_steps). Monotone, clamped to [0, 1].
double kl_anneal(long step, long anneal_steps);

/// Label-smoothed cross-entropy per non-pad target token, teacher forcing,
/// no contexts and no latents. Model must be stage 1.
LossBreakdown stage1_loss(const Model& model, const Batch& batch, const FwdCtx& ctx);

/// Per-latent standard-normal noise supplier; shape is (batch, d_z).
using NoiseSource = std::function<Tensor(LatentKind, int, int)>;
NoiseSource gaussian_noise(Rng& rng);
NoiseSource zero_noise();

/// The stage-2 objective: reconstruction CE with posterior-sampled latents
/// fused into the decoder top, plus lambda times the summed KL of every
/// active latent (normalized by target tokens, like the CE term). Context
/// summaries are computed only for the latents that consume them.
LossBreakdown stage2_objective(const Model& model, const Batch& batch, double lambda,
                               const FwdCtx& ctx, const NoiseSource& noise);

struct TrainHooks {
    std::ostream* report_log = nullptr;  // line-delimited StepReport JSON
    std::ostream* progress = nullptr;    // human-readable, includes tokens/sec
    std::string checkpoint_dir;          // empty = no checkpoints written
    std::function<void(const StepReport&)> on_step;
};

struct TrainResult {
    long steps = 0;
    std::vector<StepReport> reports;
};

/// Deterministic under (config, seed): shuffles, batches, steps Adam with the
/// inverse-sqrt warmup schedule, clips at the global-norm bound, reports every
/// step, and checkpoints per cadence plus a final image. max_steps == 0
/// writes the initial parameters unchanged.
TrainResult train(Model& model, const std::vector<ChatExample>& examples,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Checkpoint round trip for whole models. Metadata records config, stage,
/// active latents, and the step counter.
void save_model(const Model& model, const std::string& path, long step);
Model load_model(const std::string& path, long* step_out = nullptr);

/// Loads stage-1 backbone weights into a fresh stage-2 model; fusion and
/// latent parameters keep their fresh initialization. Backbone dimensions
/// must agree (LoadError listing mismatches otherwise).
void init_stage2_from_stage1(Model& stage2, const std::string& stage1_path);

}  // namespace chatnmt
