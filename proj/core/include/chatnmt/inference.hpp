#pragma once

#include <string>
#include <vector>

#include "chatnmt/batch.hpp"
#include "chatnmt/corpus.hpp"
#include "chatnmt/model.hpp"
#include "chatnmt/rng.hpp"

namespace chatnmt {

struct BeamConfig {
    int beam_size = 4;
    double alpha = 0.6;       // length-penalty strength
    int max_length = 64;      // generated-token cap (eos included)
    bool sample_latents = false;  // false: prior means; true: one prior draw

    void validate() const;  // ConfigError on violations
};

/// lp(n) = ((5 + n) / 6)^alpha; alpha = 0 gives 1 for every length.
double length_penalty(int n, double alpha);

/// Next-token distribution oracle the search algorithms run against. The
/// prefix holds previously generated tokens (no bos). Implementations may
/// assign effectively impossible tokens a very negative value.
class StepScorer {
public:
    virtual ~StepScorer() = default;
    virtual int vocab_size() const = 0;
    virtual std::vector<double> step_logprobs(const std::vector<int>& prefix) = 0;
};

/// Search result. tokens excludes bos and eos; logp accumulates every
/// generated token including the final eos when finished. score divides by
/// lp(n) where n counts generated tokens (eos included when finished).
struct Hypothesis {
    std::vector<int> tokens;
    double logp = 0.0;
    double score = 0.0;
    bool finished = false;
};

/// Beam search over the scorer: hypotheses finish on eos; after max_length
/// steps the best finished hypothesis by normalized score wins. If nothing
/// finished, the best unfinished beam is returned with finished = false.
/// Ties break toward the lexicographically smaller token sequence, making
/// the search fully deterministic.
Hypothesis beam_search(StepScorer& scorer, int eos_id, const BeamConfig& cfg);

/// Argmax decoding, written independently of beam_search (ties pick the
/// smallest token id, matching the beam's tie-break).
Hypothesis greedy_decode(StepScorer& scorer, int eos_id, int max_length);

/// Scores continuations with a translation model: the source and contexts
/// are encoded once, latents fixed once from the priors (mean or one
/// sample), then each step decodes bos + prefix. Reserved control tokens
/// (pad, bos, cls, sep) are banned from generation.
class ModelStepScorer : public StepScorer {
public:
    /// rng is required when sampling latents (ContractError otherwise).
    ModelStepScorer(const Model& model, const ChatExample& example, bool sample_latents,
                    Rng* rng);
    int vocab_size() const override { return model_.config().vocab_size; }
    std::vector<double> step_logprobs(const std::vector<int>& prefix) override;
    const std::vector<Tensor>& latents() const { return zs_; }

private:
    const Model& model_;
    PaddedSeq x_;
    Tensor h_enc_;
    std::vector<Tensor> zs_;
    int y_role_ = 0;
    int y_turn_ = 0;
};

/// One utterance end to end; max_length is clamped to the positional table.
Hypothesis translate_example(const Model& model, const ChatExample& example,
                             const BeamConfig& cfg, Rng* rng = nullptr);

/// Where the target-side history comes from when replaying a dialogue:
/// the references (gold), this run's own earlier outputs (self), or gold
/// references with the partner's input-side history rebuilt by an
/// inverse-direction model (back_translate).
enum class ReplayMode { gold, self, back_translate };
std::string to_string(ReplayMode m);
ReplayMode replay_mode_from_string(const std::string& s);

struct TurnOutput {
    int turn = 0;
    std::vector<int> tokens;
    double logp = 0.0;
    double score = 0.0;
    bool finished = true;
};

/// Translates every turn in order, assembling contexts per mode. The
/// inverse model is required for back_translate (LoadError when absent or
/// vocabulary-incompatible); it translates target-side utterances back into
/// the input language to stand in for the partner's missing input-side
/// history. Deterministic when latents use prior means.
std::vector<TurnOutput> replay_dialogue(const Model& model, const Dialogue& dialogue,
                                        Direction dir, ReplayMode mode, const BeamConfig& cfg,
                                        int window, Rng* rng = nullptr,
                                        const Model* inverse = nullptr);

}  // namespace chatnmt
