#pragma once

#include <string>
#include <vector>

#include "chatnmt/batch.hpp"
#include "chatnmt/latent.hpp"
#include "chatnmt/params.hpp"
#include "chatnmt/rng.hpp"
#include "chatnmt/tensor.hpp"

namespace chatnmt {

struct ModelConfig {
    int d = 512;             // model width
    int d_ff = 2048;         // feed-forward hidden width
    int heads = 8;           // attention heads
    int n_enc = 6;           // encoder layers
    int n_dec = 6;           // decoder layers
    int d_z = 32;            // width of each latent variable
    int vocab_size = 0;      // set from the vocabulary
    int num_roles = 2;       // speaker-role embedding rows
    int max_turns = 32;      // turn embedding rows (indices clamp above this)
    int max_positions = 512; // positional table rows
    double dropout = 0.1;
    double label_smoothing = 0.1;

    /// Throws ConfigError on any inconsistency (d not divisible by heads,
    /// non-positive extents, rates outside [0, 1)).
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct FfnParams {
    Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
    AttentionParams self;
    LayerNormParams ln1;
    FfnParams ffn;
    LayerNormParams ln2;
};

struct DecoderLayerParams {
    AttentionParams self;
    LayerNormParams ln1;
    AttentionParams cross;
    LayerNormParams ln2;
    FfnParams ffn;
    LayerNormParams ln3;
};

/// One latent variable's parameter pair.
struct LatentModule {
    LatentKind kind;
    LatentMlp prior;
    LatentMlp posterior;
};

/// Forward-pass context: dropout fires only when training with an RNG.
struct FwdCtx {
    bool training = false;
    Rng* rng = nullptr;
};

/// Encoder-decoder translation model with optional latent variables.
///
/// Stage 1 owns the backbone only (embeddings, encoder, decoder, output
/// projection); logits come straight off the decoder. Stage 2 adds the
/// fusion projection and one prior/posterior MLP pair per active latent,
/// and logits are computed from the fused states instead.
class Model {
public:
    /// Fresh model with fan-scaled uniform weight matrices, zero biases,
    /// unit layer-norm gains, and a fixed sinusoidal positional table.
    Model(const ModelConfig& cfg, int stage, LatentSet active, Rng& rng);

    const ModelConfig& config() const { return cfg_; }
    int stage() const { return stage_; }
    const LatentSet& active_latents() const { return active_; }

    /// Every trainable tensor with a stable dotted path, in a fixed order.
    ParamList named_parameters() const;

    /// Sum of token, position, role, and turn embeddings: (B, S, d).
    Tensor embed(const PaddedSeq& seq) const;

    /// Runs the full encoder stack over embedded inputs. Padded positions
    /// are never attended to. n_enc == 0 returns the input unchanged.
    Tensor encode(const Tensor& emb, const PaddedSeq& seq, const FwdCtx& ctx) const;

    /// Embeds a serialized context and runs only the first (shared) encoder
    /// layer, returning the leading summary-token state per row: (B, d).
    /// Throws ContractError when n_enc == 0 or a row does not start with the
    /// summary token.
    Tensor encode_context(const PaddedSeq& ctx_seq, const FwdCtx& ctx) const;

    /// Decoder stack: causal self-attention over y, cross-attention into the
    /// encoder states. n_dec == 0 returns the input unchanged.
    Tensor decode(const Tensor& y_emb, const PaddedSeq& y_seq, const Tensor& h_enc,
                  const PaddedSeq& x_seq, const FwdCtx& ctx) const;

    /// tanh(W_p [h_t ; z...] + b_p) with each (B, d_z) latent broadcast over
    /// time. zs must contain exactly one entry per active latent, in
    /// role-dia-tra order. Stage-1 models have no fusion layer (ContractError).
    Tensor fuse_latents(const Tensor& h_top, const std::vector<Tensor>& zs) const;

    /// (B, S, vocab) scores / normalized distributions.
    Tensor output_logits(const Tensor& states) const;
    Tensor output_probabilities(const Tensor& states) const;

    /// Access to one latent's MLPs; ContractError when inactive or stage 1.
    const LatentModule& latent(LatentKind kind) const;

    /// Widths the fusion projection and latent MLPs must have.
    int fuse_in_width() const { return cfg_.d + active_.count() * cfg_.d_z; }

private:
    Tensor sublayer_attention(const Tensor& q_in, const Tensor& kv_in,
                              const AttentionParams& p, const Tensor& mask,
                              const FwdCtx& ctx) const;
    Tensor encoder_layer(const Tensor& x, const EncoderLayerParams& layer, const Tensor& mask,
                         const FwdCtx& ctx) const;

    ModelConfig cfg_;
    int stage_;
    LatentSet active_;

    Tensor we_;  // vocab x d token table
    Tensor pe_;  // max_positions x d, fixed (no gradient)
    Tensor re_;  // num_roles x d
    Tensor te_;  // max_turns x d
    std::vector<EncoderLayerParams> enc_;
    std::vector<DecoderLayerParams> dec_;
    Tensor w_out_, b_out_;          // vocab x d, vocab
    Tensor w_fuse_, b_fuse_;        // stage 2: d x fuse_in_width, d
    std::vector<LatentModule> latents_;  // stage 2, active kinds only
};

/// Masked mean over time: (B, S, d) + sequence mask -> (B, d), dividing by
/// the per-row count of unmasked positions.
Tensor pool_masked_mean(const Tensor& h, const PaddedSeq& seq);

/// Sinusoidal position table (rows x d), even columns sine, odd cosine.
Tensor sinusoidal_positions(int rows, int d);

/// (B, heads, q_len, k_len) 0/1 mask from the key-side padding mask,
/// optionally intersected with the causal lower triangle (q_len == k_len).
Tensor attention_mask(const PaddedSeq& keys, int heads, int q_len, bool causal);

}  // namespace chatnmt
