#include "chatnmt/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>

#include "chatnmt/error.hpp"
#include "chatnmt/latent.hpp"
#include "chatnmt/vocab.hpp"

namespace chatnmt {

void BeamConfig::validate() const {
    if (beam_size < 1) throw ConfigError("beam_size must be at least 1");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (max_length < 1) throw ConfigError("max_length must be at least 1");
}

double length_penalty(int n, double alpha) {
    if (n < 0) throw ContractError("length must be non-negative");
    return std::pow((5.0 + n) / 6.0, alpha);
}

namespace {

// Finished hypotheses count the eos they consumed; running ones do not.
double normalized(double logp, int generated, double alpha) {
    return logp / length_penalty(generated, alpha);
}

struct Beam {
    std::vector<int> tokens;
    double logp = 0.0;
};

}  // namespace

Hypothesis beam_search(StepScorer& scorer, int eos_id, const BeamConfig& cfg) {
    cfg.validate();
    const int v = scorer.vocab_size();
    if (eos_id < 0 || eos_id >= v) throw ContractError("eos id outside the vocabulary");

    std::vector<Beam> active;
    active.push_back({});
    std::vector<Hypothesis> finished;

    for (int step = 0; step < cfg.max_length && !active.empty(); ++step) {
        // Expand every active beam by every token. All active prefixes have
        // the same length, so the lexicographic tie-break is a plain
        // element-wise comparison.
        struct Cand {
            int beam;
            int tok;
            double logp;
        };
        std::vector<Cand> cands;
        cands.reserve(active.size() * static_cast<size_t>(v));
        for (size_t b = 0; b < active.size(); ++b) {
            std::vector<double> lp = scorer.step_logprobs(active[b].tokens);
            if (static_cast<int>(lp.size()) != v)
                throw ContractError("scorer returned a distribution of the wrong size");
            for (int t = 0; t < v; ++t) cands.push_back({static_cast<int>(b), t, active[b].logp + lp[t]});
        }
        auto lex_less = [&](const Cand& a, const Cand& c) {
            const std::vector<int>& at = active[static_cast<size_t>(a.beam)].tokens;
            const std::vector<int>& ct = active[static_cast<size_t>(c.beam)].tokens;
            for (size_t i = 0; i < at.size(); ++i)
                if (at[i] != ct[i]) return at[i] < ct[i];
            return a.tok < c.tok;
        };
        std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& c) {
            if (a.logp != c.logp) return a.logp > c.logp;
            return lex_less(a, c);
        });

        size_t take = std::min(cands.size(), static_cast<size_t>(cfg.beam_size));
        std::vector<Beam> next;
        for (size_t i = 0; i < take; ++i) {
            const Cand& c = cands[i];
            Beam nb = active[static_cast<size_t>(c.beam)];
            nb.logp = c.logp;
            if (c.tok == eos_id) {
                int n = static_cast<int>(nb.tokens.size()) + 1;
                finished.push_back({std::move(nb.tokens), c.logp,
                                    normalized(c.logp, n, cfg.alpha), true});
            } else {
                nb.tokens.push_back(c.tok);
                next.push_back(std::move(nb));
            }
        }
        active = std::move(next);
    }

    if (!finished.empty()) {
        auto best = std::min_element(finished.begin(), finished.end(),
                                     [](const Hypothesis& a, const Hypothesis& b) {
                                         if (a.score != b.score) return a.score > b.score;
                                         return a.tokens < b.tokens;
                                     });
        return *best;
    }
    // Nothing reached eos within the budget; surface the most probable
    // running beam and say so. All survivors share the same length, so the
    // first (highest logp, then lexicographic) is the winner.
    if (active.empty()) throw ContractError("beam search retained no hypotheses");
    Beam& b = active.front();
    int n = static_cast<int>(b.tokens.size());
    return {std::move(b.tokens), b.logp, normalized(b.logp, n, cfg.alpha), false};
}

Hypothesis greedy_decode(StepScorer& scorer, int eos_id, int max_length) {
    if (max_length < 1) throw ConfigError("max_length must be at least 1");
    const int v = scorer.vocab_size();
    if (eos_id < 0 || eos_id >= v) throw ContractError("eos id outside the vocabulary");

    Hypothesis hyp;
    for (int step = 0; step < max_length; ++step) {
        std::vector<double> lp = scorer.step_logprobs(hyp.tokens);
        if (static_cast<int>(lp.size()) != v)
            throw ContractError("scorer returned a distribution of the wrong size");
        int best = 0;
        for (int t = 1; t < v; ++t)
            if (lp[t] > lp[best]) best = t;
        hyp.logp += lp[best];
        if (best == eos_id) {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push_back(best);
    }
    hyp.score = hyp.logp;  // greedy applies no length normalization
    return hyp;
}

ModelStepScorer::ModelStepScorer(const Model& model, const ChatExample& example,
                                 bool sample_latents, Rng* rng)
    : model_(model) {
    if (sample_latents && rng == nullptr)
        throw ContractError("sampling latents at inference time needs an rng");

    Batch b = make_batch({example});
    x_ = b.x;
    y_role_ = example.y_u.role_id;
    y_turn_ = example.y_u.turn_index;

    FwdCtx ctx;  // inference: no dropout
    h_enc_ = model_.encode(model_.embed(x_), x_, ctx);

    const LatentSet& active = model_.active_latents();
    if (model_.stage() == 2 && active.count() > 0) {
        Tensor h_x = pool_masked_mean(h_enc_, x_);
        Tensor h_ctx_role, h_ctx_x, h_ctx_y;
        if (active.has(LatentKind::role)) h_ctx_role = model_.encode_context(b.ctx_role, ctx);
        if (active.has(LatentKind::dia) || active.has(LatentKind::tra))
            h_ctx_x = model_.encode_context(b.ctx_x, ctx);
        if (active.has(LatentKind::tra)) h_ctx_y = model_.encode_context(b.ctx_y, ctx);

        for (LatentKind kind : active.active()) {
            std::vector<Tensor> reps;
            switch (kind) {
                case LatentKind::role: reps = {h_x, h_ctx_role}; break;
                case LatentKind::dia: reps = {h_x, h_ctx_x}; break;
                case LatentKind::tra: reps = {h_x, h_ctx_x, h_ctx_y}; break;
            }
            GaussianParams p = prior_forward(kind, model_.latent(kind).prior, reps);
            if (sample_latents) {
                Tensor noise = Tensor::randn({1, model_.config().d_z}, *rng);
                zs_.push_back(sample_latent(p, noise));
            } else {
                zs_.push_back(p.mu);
            }
        }
    }
}

std::vector<double> ModelStepScorer::step_logprobs(const std::vector<int>& prefix) {
    const ModelConfig& cfg = model_.config();
    const int n = static_cast<int>(prefix.size()) + 1;  // bos + generated so far
    if (n > cfg.max_positions)
        throw ContractError("decoding prefix exceeds the positional table");

    PaddedSeq y;
    y.rows = 1;
    y.cols = n;
    y.ids.assign(static_cast<size_t>(n), Vocabulary::kBos);
    std::copy(prefix.begin(), prefix.end(), y.ids.begin() + 1);
    y.roles.assign(static_cast<size_t>(n), y_role_);
    y.turns.assign(static_cast<size_t>(n), y_turn_);
    y.positions.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) y.positions[static_cast<size_t>(i)] = i;
    y.mask.assign(static_cast<size_t>(n), 1.0);

    FwdCtx ctx;
    Tensor h = model_.decode(model_.embed(y), y, h_enc_, x_, ctx);
    if (model_.stage() == 2) h = model_.fuse_latents(h, zs_);
    Tensor lp = log_softmax_last_dim(model_.output_logits(h));

    std::span<const double> vals = lp.data();
    const int v = cfg.vocab_size;
    std::vector<double> out(vals.begin() + static_cast<size_t>(n - 1) * v,
                            vals.begin() + static_cast<size_t>(n) * v);
    // Control tokens never appear in generated text.
    for (int banned : {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kCls, Vocabulary::kSep})
        out[static_cast<size_t>(banned)] = -1e30;
    return out;
}

Hypothesis translate_example(const Model& model, const ChatExample& example,
                             const BeamConfig& cfg, Rng* rng) {
    cfg.validate();
    BeamConfig eff = cfg;
    eff.max_length = std::min(cfg.max_length, model.config().max_positions - 1);
    ModelStepScorer scorer(model, example, cfg.sample_latents, rng);
    return beam_search(scorer, Vocabulary::kEos, eff);
}

std::string to_string(ReplayMode m) {
    switch (m) {
        case ReplayMode::gold: return "gold";
        case ReplayMode::self: return "self";
        case ReplayMode::back_translate: return "back_translate";
    }
    throw ContractError("unknown replay mode");
}

ReplayMode replay_mode_from_string(const std::string& s) {
    if (s == "gold") return ReplayMode::gold;
    if (s == "self") return ReplayMode::self;
    if (s == "back_translate") return ReplayMode::back_translate;
    throw ConfigError("unknown replay mode '" + s + "' (gold, self, back_translate)");
}

namespace {

// Back-translations are deterministic (prior means) and cached per turn, so
// a turn referenced by several later context windows is translated once.
std::vector<int> back_translate_turn(const Model& inverse, const Utterance& y_gold,
                                     const BeamConfig& cfg,
                                     std::map<int, std::vector<int>>& cache) {
    auto it = cache.find(y_gold.turn_index);
    if (it != cache.end()) return it->second;
    ChatExample ex;
    ex.turn = y_gold.turn_index;
    ex.x_u = y_gold;
    ex.y_u.role_id = y_gold.role_id;
    ex.y_u.turn_index = y_gold.turn_index;
    BeamConfig bt = cfg;
    bt.sample_latents = false;
    std::vector<int> toks = translate_example(inverse, ex, bt).tokens;
    cache.emplace(y_gold.turn_index, toks);
    return toks;
}

}  // namespace

std::vector<TurnOutput> replay_dialogue(const Model& model, const Dialogue& dialogue,
                                        Direction dir, ReplayMode mode, const BeamConfig& cfg,
                                        int window, Rng* rng, const Model* inverse) {
    cfg.validate();
    if (window < 0) throw ContractError("context window must be non-negative");
    if (mode == ReplayMode::back_translate) {
        if (inverse == nullptr)
            throw LoadError("back-translation replay needs an inverse-direction model");
        if (inverse->config().vocab_size != model.config().vocab_size)
            throw LoadError("inverse model vocabulary size " +
                            std::to_string(inverse->config().vocab_size) +
                            " does not match the forward model's " +
                            std::to_string(model.config().vocab_size));
    }

    Dialogue working = dialogue;
    std::map<int, std::vector<int>> bt_cache;
    std::vector<TurnOutput> out;
    out.reserve(working.turns.size());

    for (int t = 0; t < static_cast<int>(working.turns.size()); ++t) {
        ChatExample ex = build_context_sets(working, t, dir, window);
        if (mode == ReplayMode::back_translate) {
            // The partner never produced input-language text, so rebuild
            // their input-side history from the target-side references.
            // Same-role history stays gold: the speaker knows their own words.
            for (size_t i = 0; i < ex.c_x.size(); ++i) {
                if (ex.c_x[i].role_id == ex.x_u.role_id) continue;
                ex.c_x[i].tokens = back_translate_turn(*inverse, ex.c_y[i], cfg, bt_cache);
            }
        }
        Hypothesis hyp = translate_example(model, ex, cfg, rng);
        if (mode == ReplayMode::self) {
            Utterance& slot = dir == Direction::forward
                                  ? working.turns[static_cast<size_t>(t)].second
                                  : working.turns[static_cast<size_t>(t)].first;
            slot.tokens = hyp.tokens;
        }
        out.push_back({t, std::move(hyp.tokens), hyp.logp, hyp.score, hyp.finished});
    }
    return out;
}

}  // namespace chatnmt
