#include "chatnmt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "chatnmt/adam.hpp"
#include "chatnmt/checkpoint.hpp"
#include "chatnmt/error.hpp"

namespace chatnmt {

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
    if (batch_tokens <= 0) throw ConfigError("batch_tokens must be positive");
    if (anneal_steps <= 0) throw ConfigError("anneal_steps must be positive");
    if (context_window < 0) throw ConfigError("context_window must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
    if (warmup_steps <= 0) throw ConfigError("warmup_steps must be positive");
    if (lr_scale <= 0.0) throw ConfigError("lr_scale must be positive");
    if (clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
}

std::string StepReport::to_json_line() const {
    nlohmann::json j;
    j["step"] = step;
    j["loss"] = loss;
    j["ce"] = ce;
    j["lambda"] = lambda;
    j["lr"] = lr;
    j["grad_norm"] = grad_norm;
    j["target_tokens"] = target_tokens;
    for (const auto& [kind, v] : kl_per_word) j["kl_" + to_string(kind)] = v;
    return j.dump();
}

double kl_anneal(long step, long anneal_steps) {
    if (anneal_steps <= 0) throw ContractError("anneal_steps must be positive");
    if (step < 0) throw ContractError("step must be non-negative");
    if (step >= anneal_steps) return 1.0;
    return double(step) / double(anneal_steps);
}

namespace {

// Label-smoothed CE summed over non-pad tokens, divided by their count.
// Also extracts the plain NLL per token for reporting.
Tensor smoothed_ce(const Model& model, const Tensor& states, const PaddedSeq& y_out,
                   long target_tokens, double* plain_ce) {
    int v = model.config().vocab_size;
    double eps = model.config().label_smoothing;
    Tensor lp = log_softmax_last_dim(model.output_logits(states));
    Tensor tgt_lp = gather_last_dim(lp, y_out.ids);  // (B, S)
    std::vector<double> mask_data = y_out.mask;
    Tensor mask = Tensor::from_data(std::move(mask_data), {y_out.rows, y_out.cols});

    if (plain_ce) {
        double nll = 0.0;
        for (size_t i = 0; i < tgt_lp.numel(); ++i) nll -= y_out.mask[i] * tgt_lp.data()[i];
        *plain_ce = nll / double(target_tokens);
    }

    // -sum_t [ (1-eps) lp[tgt] + eps/(V-1) * sum_{k != tgt} lp[k] ], regrouped
    // so only a gather and a full-row sum are needed.
    double off = eps / double(v - 1);
    Tensor per_token = add(scale(tgt_lp, 1.0 - eps - off), scale(sum_last_dim(lp), off));
    return scale(sum_all(mul(per_token, mask)), -1.0 / double(target_tokens));
}

std::vector<Tensor> prior_reps(LatentKind kind, const Tensor& h_x, const Tensor& h_ctx_role,
                               const Tensor& h_ctx_x, const Tensor& h_ctx_y) {
    switch (kind) {
        case LatentKind::role: return {h_x, h_ctx_role};
        case LatentKind::dia: return {h_x, h_ctx_x};
        case LatentKind::tra: return {h_x, h_ctx_x, h_ctx_y};
    }
    throw ContractError("unknown latent kind");
}

}  // namespace

LossBreakdown stage1_loss(const Model& model, const Batch& batch, const FwdCtx& ctx) {
    if (model.stage() != 1) throw ContractError("stage1_loss needs a stage-1 model");
    if (batch.example_count == 0) throw ContractError("empty batch");
    Tensor h_enc = model.encode(model.embed(batch.x), batch.x, ctx);
    Tensor h_dec = model.decode(model.embed(batch.y_in), batch.y_in, h_enc, batch.x, ctx);
    LossBreakdown out;
    out.target_tokens = batch.target_tokens;
    out.loss = smoothed_ce(model, h_dec, batch.y_out, batch.target_tokens, &out.ce);
    return out;
}

NoiseSource gaussian_noise(Rng& rng) {
    return [&rng](LatentKind, int b, int d_z) { return Tensor::randn({b, d_z}, rng); };
}

NoiseSource zero_noise() {
    return [](LatentKind, int b, int d_z) { return Tensor::zeros({b, d_z}); };
}

LossBreakdown stage2_objective(const Model& model, const Batch& batch, double lambda,
                               const FwdCtx& ctx, const NoiseSource& noise) {
    if (model.stage() != 2) throw ContractError("stage2_objective needs a stage-2 model");
    if (batch.example_count == 0) throw ContractError("empty batch");
    if (lambda < 0.0) throw ContractError("lambda must be non-negative");
    const LatentSet& active = model.active_latents();

    Tensor h_enc = model.encode(model.embed(batch.x), batch.x, ctx);
    Tensor h_x = pool_masked_mean(h_enc, batch.x);

    // Context summaries only for the latents that consume them.
    Tensor h_ctx_role, h_ctx_x, h_ctx_y;
    if (active.has(LatentKind::role)) h_ctx_role = model.encode_context(batch.ctx_role, ctx);
    if (active.has(LatentKind::dia) || active.has(LatentKind::tra))
        h_ctx_x = model.encode_context(batch.ctx_x, ctx);
    if (active.has(LatentKind::tra)) h_ctx_y = model.encode_context(batch.ctx_y, ctx);

    LossBreakdown out;
    out.lambda = lambda;
    out.target_tokens = batch.target_tokens;

    std::vector<Tensor> zs;
    Tensor kl_sum;
    if (active.count() > 0) {
        // The posterior additionally sees the pooled encoding of the full
        // reference (y_out = reference + eos, no bos).
        Tensor h_y = pool_masked_mean(model.encode(model.embed(batch.y_out), batch.y_out, ctx),
                                      batch.y_out);
        for (LatentKind kind : active.active()) {
            const LatentModule& mod = model.latent(kind);
            std::vector<Tensor> reps = prior_reps(kind, h_x, h_ctx_role, h_ctx_x, h_ctx_y);
            GaussianParams p = prior_forward(kind, mod.prior, reps);
            GaussianParams q = posterior_forward(kind, mod.posterior, reps, h_y);
            zs.push_back(sample_latent(q, noise(kind, batch.x.rows, model.config().d_z)));
            Tensor kl = kl_divergence(q, p);
            // Clamp the report at zero: the closed form can round to a tiny
            // negative when q and p nearly coincide.
            out.kl_per_word.emplace_back(kind,
                                         std::max(0.0, kl.item() / double(batch.target_tokens)));
            kl_sum = kl_sum.defined() ? add(kl_sum, kl) : kl;
        }
    }

    Tensor h_dec = model.decode(model.embed(batch.y_in), batch.y_in, h_enc, batch.x, ctx);
    Tensor fused = model.fuse_latents(h_dec, zs);
    Tensor ce = smoothed_ce(model, fused, batch.y_out, batch.target_tokens, &out.ce);
    out.loss = kl_sum.defined()
                   ? add(ce, scale(kl_sum, lambda / double(batch.target_tokens)))
                   : ce;
    return out;
}

namespace {

void save_with_meta(const Model& model, const std::string& path, long step) {
    nlohmann::json meta;
    meta["format"] = 1;
    meta["stage"] = model.stage();
    meta["step"] = step;
    std::vector<std::string> names;
    for (LatentKind k : model.active_latents().active()) names.push_back(to_string(k));
    meta["active"] = names;
    meta["config"] = nlohmann::json::parse(model.config().to_json());
    save_checkpoint(path, meta.dump(), model.named_parameters());
}

}  // namespace

TrainResult train(Model& model, const std::vector<ChatExample>& examples,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    if (model.stage() != cfg.stage) throw ConfigError("model stage does not match config stage");
    if (cfg.stage == 2) {
        LatentSet expected = LatentSet::all();
        for (LatentKind k : kAllLatentKinds)
            if (cfg.disabled.has(k)) expected.set(k, false);
        if (!(model.active_latents() == expected))
            throw ConfigError("model's active latents do not match the ablation config");
        if (expected.count() == 0 && hooks.progress)
            (*hooks.progress) << "note: all latents ablated; objective reduces to plain "
                                 "cross-entropy\n";
    }
    if (examples.empty() && cfg.max_steps > 0) throw ContractError("no training examples");

    namespace fs = std::filesystem;
    if (!hooks.checkpoint_dir.empty()) fs::create_directories(hooks.checkpoint_dir);

    ParamList params = model.named_parameters();
    AdamState opt;
    TrainResult result;
    Rng shuffle_base(cfg.seed);
    Rng step_base = shuffle_base.child(0x5EEDED);

    long step = 0;
    for (long epoch = 0; step < cfg.max_steps; ++epoch) {
        Rng epoch_rng = shuffle_base.child(1 + epoch);
        std::vector<Batch> batches = make_batches(examples, cfg.batch_tokens, &epoch_rng);
        for (const Batch& batch : batches) {
            if (step >= cfg.max_steps) break;
            ++step;
            auto t0 = std::chrono::steady_clock::now();
            Rng step_rng = step_base.child(step);
            FwdCtx fctx{true, &step_rng};
            double lambda = kl_anneal(step, cfg.anneal_steps);

            zero_grads(params);
            LossBreakdown lb = cfg.stage == 1
                                   ? stage1_loss(model, batch, fctx)
                                   : stage2_objective(model, batch, lambda, fctx,
                                                      gaussian_noise(step_rng));
            backward(lb.loss);
            double norm = clip_grads(params, cfg.clip_norm);
            double lr = transformer_lr(step, model.config().d, cfg.warmup_steps) * cfg.lr_scale;
            adam_step(params, opt, lr);

            StepReport report;
            report.step = step;
            report.loss = lb.loss.item();
            report.ce = lb.ce;
            report.lambda = cfg.stage == 1 ? 0.0 : lambda;
            report.lr = lr;
            report.grad_norm = norm;
            report.target_tokens = lb.target_tokens;
            report.kl_per_word = lb.kl_per_word;
            auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
            report.tokens_per_sec =
                dt.count() > 0.0 ? double(lb.target_tokens) / dt.count() : 0.0;

            if (hooks.report_log) (*hooks.report_log) << report.to_json_line() << "\n";
            if (hooks.progress)
                (*hooks.progress) << "step " << step << " loss " << report.loss << " ce "
                                  << report.ce << " tok/s " << report.tokens_per_sec << "\n";
            if (hooks.on_step) hooks.on_step(report);
            result.reports.push_back(std::move(report));

            if (!hooks.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
                step % cfg.checkpoint_every == 0)
                save_with_meta(model, hooks.checkpoint_dir + "/ckpt-" + std::to_string(step) +
                                          ".bin",
                               step);
        }
    }
    result.steps = step;
    if (!hooks.checkpoint_dir.empty())
        save_with_meta(model, hooks.checkpoint_dir + "/ckpt-final.bin", step);
    return result;
}

void save_model(const Model& model, const std::string& path, long step) {
    save_with_meta(model, path, step);
}

Model load_model(const std::string& path, long* step_out) {
    CheckpointImage image = load_checkpoint(path);
    ModelConfig cfg;
    int stage = 0;
    LatentSet active = LatentSet::none();
    long step = 0;
    try {
        nlohmann::json meta = nlohmann::json::parse(image.meta_json);
        cfg = ModelConfig::from_json(meta.at("config").dump());
        stage = meta.at("stage").get<int>();
        step = meta.at("step").get<long>();
        for (const auto& name : meta.at("active"))
            active.set(latent_kind_from_string(name.get<std::string>()), true);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path + ": bad checkpoint metadata: " + e.what());
    }
    Rng init_rng(0);
    Model model(cfg, stage, active, init_rng);
    ParamList params = model.named_parameters();
    restore_params(params, image);
    if (step_out) *step_out = step;
    return model;
}

void init_stage2_from_stage1(Model& stage2, const std::string& stage1_path) {
    if (stage2.stage() != 2) throw ContractError("target model must be stage 2");
    CheckpointImage image = load_checkpoint(stage1_path);
    ModelConfig file_cfg;
    try {
        nlohmann::json meta = nlohmann::json::parse(image.meta_json);
        if (meta.at("stage").get<int>() != 1)
            throw LoadError(stage1_path + ": not a stage-1 checkpoint");
        file_cfg = ModelConfig::from_json(meta.at("config").dump());
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(stage1_path + ": bad checkpoint metadata: " + e.what());
    }

    const ModelConfig& want = stage2.config();
    std::string mismatches;
    auto check = [&](int a, int b, const char* name) {
        if (a != b) {
            if (!mismatches.empty()) mismatches += "; ";
            mismatches += std::string(name) + " " + std::to_string(b) + " in file, " +
                          std::to_string(a) + " in model";
        }
    };
    check(want.d, file_cfg.d, "d");
    check(want.d_ff, file_cfg.d_ff, "d_ff");
    check(want.heads, file_cfg.heads, "heads");
    check(want.n_enc, file_cfg.n_enc, "n_enc");
    check(want.n_dec, file_cfg.n_dec, "n_dec");
    check(want.vocab_size, file_cfg.vocab_size, "vocab_size");
    check(want.num_roles, file_cfg.num_roles, "num_roles");
    check(want.max_turns, file_cfg.max_turns, "max_turns");
    check(want.max_positions, file_cfg.max_positions, "max_positions");
    if (!mismatches.empty())
        throw LoadError(stage1_path + ": backbone mismatch: " + mismatches);

    ParamList params = stage2.named_parameters();
    restore_params(params, image, /*allow_missing_in_file=*/true);
}

}  // namespace chatnmt
