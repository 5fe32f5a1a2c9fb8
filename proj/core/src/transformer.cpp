#include "chatnmt/model.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "chatnmt/error.hpp"
#include "chatnmt/init.hpp"

namespace chatnmt {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(d, "d");
    positive(d_ff, "d_ff");
    positive(heads, "heads");
    positive(d_z, "d_z");
    positive(num_roles, "num_roles");
    positive(max_turns, "max_turns");
    positive(max_positions, "max_positions");
    if (n_enc < 0 || n_dec < 0) throw ConfigError("layer counts must be non-negative");
    if (d % heads != 0) throw ConfigError("d must be divisible by heads");
    if (vocab_size < int(Vocabulary::reserved().size()))
        throw ConfigError("vocab_size must cover the reserved token slots");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ConfigError("label_smoothing must lie in [0, 1)");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["d"] = d;
    j["d_ff"] = d_ff;
    j["heads"] = heads;
    j["n_enc"] = n_enc;
    j["n_dec"] = n_dec;
    j["d_z"] = d_z;
    j["vocab_size"] = vocab_size;
    j["num_roles"] = num_roles;
    j["max_turns"] = max_turns;
    j["max_positions"] = max_positions;
    j["dropout"] = dropout;
    j["label_smoothing"] = label_smoothing;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig cfg;
    try {
        nlohmann::json j = nlohmann::json::parse(text);
        cfg.d = j.at("d").get<int>();
        cfg.d_ff = j.at("d_ff").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.n_enc = j.at("n_enc").get<int>();
        cfg.n_dec = j.at("n_dec").get<int>();
        cfg.d_z = j.at("d_z").get<int>();
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.num_roles = j.at("num_roles").get<int>();
        cfg.max_turns = j.at("max_turns").get<int>();
        cfg.max_positions = j.at("max_positions").get<int>();
        cfg.dropout = j.at("dropout").get<double>();
        cfg.label_smoothing = j.at("label_smoothing").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Tensor sinusoidal_positions(int rows, int d) {
    std::vector<double> data(size_t(rows) * d);
    for (int pos = 0; pos < rows; ++pos) {
        for (int i = 0; 2 * i < d; ++i) {
            double angle = pos * std::exp(-std::log(10000.0) * (2.0 * i) / d);
            data[size_t(pos) * d + 2 * i] = std::sin(angle);
            if (2 * i + 1 < d) data[size_t(pos) * d + 2 * i + 1] = std::cos(angle);
        }
    }
    return Tensor::from_data(std::move(data), {rows, d});
}

Tensor attention_mask(const PaddedSeq& keys, int heads, int q_len, bool causal) {
    if (causal && q_len != keys.cols)
        throw ContractError("causal attention needs square query/key lengths");
    int b = keys.rows, sk = keys.cols;
    std::vector<double> m(size_t(b) * heads * q_len * sk);
    size_t idx = 0;
    for (int bi = 0; bi < b; ++bi)
        for (int h = 0; h < heads; ++h)
            for (int q = 0; q < q_len; ++q)
                for (int k = 0; k < sk; ++k, ++idx) {
                    double keep = keys.mask[size_t(bi) * sk + k];
                    if (causal && k > q) keep = 0.0;
                    m[idx] = keep;
                }
    return Tensor::from_data(std::move(m), {b, heads, q_len, sk});
}

namespace {

AttentionParams init_attention(int d, Rng& rng) {
    AttentionParams p;
    p.wq = fan_uniform(d, d, rng);
    p.bq = zero_param(d);
    p.wk = fan_uniform(d, d, rng);
    p.bk = zero_param(d);
    p.wv = fan_uniform(d, d, rng);
    p.bv = zero_param(d);
    p.wo = fan_uniform(d, d, rng);
    p.bo = zero_param(d);
    return p;
}

LayerNormParams init_layer_norm(int d) {
    return {Tensor::full({d}, 1.0, true), zero_param(d)};
}

FfnParams init_ffn(int d, int d_ff, Rng& rng) {
    FfnParams p;
    p.w1 = fan_uniform(d_ff, d, rng);
    p.b1 = zero_param(d_ff);
    p.w2 = fan_uniform(d, d_ff, rng);
    p.b2 = zero_param(d);
    return p;
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
    Tensor h = relu(add(matmul(x, p.w1, false, true), p.b1));
    return add(matmul(h, p.w2, false, true), p.b2);
}

void push_attention(ParamList& out, const std::string& prefix, const AttentionParams& p) {
    out.push_back({prefix + ".wq", p.wq});
    out.push_back({prefix + ".bq", p.bq});
    out.push_back({prefix + ".wk", p.wk});
    out.push_back({prefix + ".bk", p.bk});
    out.push_back({prefix + ".wv", p.wv});
    out.push_back({prefix + ".bv", p.bv});
    out.push_back({prefix + ".wo", p.wo});
    out.push_back({prefix + ".bo", p.bo});
}

void push_layer_norm(ParamList& out, const std::string& prefix, const LayerNormParams& p) {
    out.push_back({prefix + ".gain", p.gain});
    out.push_back({prefix + ".bias", p.bias});
}

void push_ffn(ParamList& out, const std::string& prefix, const FfnParams& p) {
    out.push_back({prefix + ".w1", p.w1});
    out.push_back({prefix + ".b1", p.b1});
    out.push_back({prefix + ".w2", p.w2});
    out.push_back({prefix + ".b2", p.b2});
}

void push_latent_mlp(ParamList& out, const std::string& prefix, const LatentMlp& m) {
    out.push_back({prefix + ".w1", m.w1});
    out.push_back({prefix + ".b1", m.b1});
    out.push_back({prefix + ".w2", m.w2});
    out.push_back({prefix + ".b2", m.b2});
}

}  // namespace

Model::Model(const ModelConfig& cfg, int stage, LatentSet active, Rng& rng)
    : cfg_(cfg), stage_(stage), active_(active) {
    cfg_.validate();
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (stage == 1) active_ = LatentSet::none();

    we_ = fan_uniform(cfg_.vocab_size, cfg_.d, rng);
    pe_ = sinusoidal_positions(cfg_.max_positions, cfg_.d);
    re_ = fan_uniform(cfg_.num_roles, cfg_.d, rng);
    te_ = fan_uniform(cfg_.max_turns, cfg_.d, rng);

    for (int i = 0; i < cfg_.n_enc; ++i) {
        EncoderLayerParams layer;
        layer.self = init_attention(cfg_.d, rng);
        layer.ln1 = init_layer_norm(cfg_.d);
        layer.ffn = init_ffn(cfg_.d, cfg_.d_ff, rng);
        layer.ln2 = init_layer_norm(cfg_.d);
        enc_.push_back(std::move(layer));
    }
    for (int i = 0; i < cfg_.n_dec; ++i) {
        DecoderLayerParams layer;
        layer.self = init_attention(cfg_.d, rng);
        layer.ln1 = init_layer_norm(cfg_.d);
        layer.cross = init_attention(cfg_.d, rng);
        layer.ln2 = init_layer_norm(cfg_.d);
        layer.ffn = init_ffn(cfg_.d, cfg_.d_ff, rng);
        layer.ln3 = init_layer_norm(cfg_.d);
        dec_.push_back(std::move(layer));
    }
    w_out_ = fan_uniform(cfg_.vocab_size, cfg_.d, rng);
    b_out_ = zero_param(cfg_.vocab_size);

    if (stage_ == 2) {
        w_fuse_ = fan_uniform(cfg_.d, fuse_in_width(), rng);
        b_fuse_ = zero_param(cfg_.d);
        for (LatentKind kind : active_.active()) {
            LatentModule mod;
            mod.kind = kind;
            int reps = prior_rep_count(kind);
            mod.prior = init_latent_mlp(reps * cfg_.d, cfg_.d, cfg_.d_z, rng);
            mod.posterior = init_latent_mlp((reps + 1) * cfg_.d, cfg_.d, cfg_.d_z, rng);
            latents_.push_back(std::move(mod));
        }
    }
}

ParamList Model::named_parameters() const {
    ParamList out;
    out.push_back({"embed.we", we_});
    out.push_back({"embed.re", re_});
    out.push_back({"embed.te", te_});
    for (size_t i = 0; i < enc_.size(); ++i) {
        std::string base = "enc." + std::to_string(i);
        push_attention(out, base + ".self", enc_[i].self);
        push_layer_norm(out, base + ".ln1", enc_[i].ln1);
        push_ffn(out, base + ".ffn", enc_[i].ffn);
        push_layer_norm(out, base + ".ln2", enc_[i].ln2);
    }
    for (size_t i = 0; i < dec_.size(); ++i) {
        std::string base = "dec." + std::to_string(i);
        push_attention(out, base + ".self", dec_[i].self);
        push_layer_norm(out, base + ".ln1", dec_[i].ln1);
        push_attention(out, base + ".cross", dec_[i].cross);
        push_layer_norm(out, base + ".ln2", dec_[i].ln2);
        push_ffn(out, base + ".ffn", dec_[i].ffn);
        push_layer_norm(out, base + ".ln3", dec_[i].ln3);
    }
    out.push_back({"out.w", w_out_});
    out.push_back({"out.b", b_out_});
    if (stage_ == 2) {
        out.push_back({"fuse.w", w_fuse_});
        out.push_back({"fuse.b", b_fuse_});
        for (const LatentModule& mod : latents_) {
            push_latent_mlp(out, "prior." + to_string(mod.kind), mod.prior);
            push_latent_mlp(out, "posterior." + to_string(mod.kind), mod.posterior);
        }
    }
    return out;
}

Tensor Model::embed(const PaddedSeq& seq) const {
    std::vector<int> shape = {seq.rows, seq.cols};
    Tensor tok = embedding_lookup(we_, seq.ids, shape);
    Tensor pos = embedding_lookup(pe_, seq.positions, shape);
    Tensor rol = embedding_lookup(re_, seq.roles, shape);
    Tensor trn = embedding_lookup(te_, seq.turns, shape);
    return add(add(tok, pos), add(rol, trn));
}

namespace {

Tensor maybe_dropout(const Tensor& x, double p, const FwdCtx& ctx) {
    if (!ctx.training || p == 0.0) return x;
    if (!ctx.rng) throw ContractError("training forward pass needs an RNG for dropout");
    return dropout(x, p, true, *ctx.rng);
}

}  // namespace

Tensor Model::sublayer_attention(const Tensor& q_in, const Tensor& kv_in,
                                 const AttentionParams& p, const Tensor& mask,
                                 const FwdCtx&) const {
    int b = q_in.dim(0), sq = q_in.dim(1), sk = kv_in.dim(1);
    int h = cfg_.heads, dk = cfg_.d / h;
    Tensor q = add(matmul(q_in, p.wq, false, true), p.bq);
    Tensor k = add(matmul(kv_in, p.wk, false, true), p.bk);
    Tensor v = add(matmul(kv_in, p.wv, false, true), p.bv);
    Tensor qh = permute(reshape(q, {b, sq, h, dk}), {0, 2, 1, 3});
    Tensor kh = permute(reshape(k, {b, sk, h, dk}), {0, 2, 1, 3});
    Tensor vh = permute(reshape(v, {b, sk, h, dk}), {0, 2, 1, 3});
    Tensor scores = scale(matmul(qh, kh, false, true), 1.0 / std::sqrt(double(dk)));
    Tensor probs = masked_softmax_last_dim(scores, mask);
    Tensor mixed = matmul(probs, vh);  // (b, h, sq, dk)
    Tensor merged = reshape(permute(mixed, {0, 2, 1, 3}), {b, sq, cfg_.d});
    return add(matmul(merged, p.wo, false, true), p.bo);
}

Tensor Model::encoder_layer(const Tensor& x, const EncoderLayerParams& layer, const Tensor& mask,
                            const FwdCtx& ctx) const {
    Tensor a = sublayer_attention(x, x, layer.self, mask, ctx);
    Tensor x1 = layer_norm(add(x, maybe_dropout(a, cfg_.dropout, ctx)), layer.ln1.gain,
                           layer.ln1.bias);
    Tensor f = ffn_forward(x1, layer.ffn);
    return layer_norm(add(x1, maybe_dropout(f, cfg_.dropout, ctx)), layer.ln2.gain,
                      layer.ln2.bias);
}

Tensor Model::encode(const Tensor& emb, const PaddedSeq& seq, const FwdCtx& ctx) const {
    if (enc_.empty()) return emb;
    Tensor mask = attention_mask(seq, cfg_.heads, seq.cols, false);
    Tensor x = emb;
    for (const EncoderLayerParams& layer : enc_) x = encoder_layer(x, layer, mask, ctx);
    return x;
}

Tensor Model::encode_context(const PaddedSeq& ctx_seq, const FwdCtx& ctx) const {
    if (enc_.empty()) throw ContractError("context encoding needs at least one encoder layer");
    for (int r = 0; r < ctx_seq.rows; ++r) {
        size_t head = size_t(r) * ctx_seq.cols;
        if (ctx_seq.cols == 0 || ctx_seq.ids[head] != Vocabulary::kCls ||
            ctx_seq.mask[head] == 0.0)
            throw ContractError("context row " + std::to_string(r) +
                                " does not start with the summary token");
    }
    Tensor emb = embed(ctx_seq);
    Tensor mask = attention_mask(ctx_seq, cfg_.heads, ctx_seq.cols, false);
    Tensor x = encoder_layer(emb, enc_.front(), mask, ctx);
    // Mean over a mask selecting only column 0 == the summary-token state.
    std::vector<double> head_mask(size_t(ctx_seq.rows) * ctx_seq.cols, 0.0);
    for (int r = 0; r < ctx_seq.rows; ++r) head_mask[size_t(r) * ctx_seq.cols] = 1.0;
    return mean_masked(x, Tensor::from_data(std::move(head_mask), {ctx_seq.rows, ctx_seq.cols}));
}

Tensor Model::decode(const Tensor& y_emb, const PaddedSeq& y_seq, const Tensor& h_enc,
                     const PaddedSeq& x_seq, const FwdCtx& ctx) const {
    if (dec_.empty()) return y_emb;
    Tensor self_mask = attention_mask(y_seq, cfg_.heads, y_seq.cols, true);
    Tensor cross_mask = attention_mask(x_seq, cfg_.heads, y_seq.cols, false);
    Tensor x = y_emb;
    for (const DecoderLayerParams& layer : dec_) {
        Tensor a = sublayer_attention(x, x, layer.self, self_mask, ctx);
        x = layer_norm(add(x, maybe_dropout(a, cfg_.dropout, ctx)), layer.ln1.gain,
                       layer.ln1.bias);
        Tensor c = sublayer_attention(x, h_enc, layer.cross, cross_mask, ctx);
        x = layer_norm(add(x, maybe_dropout(c, cfg_.dropout, ctx)), layer.ln2.gain,
                       layer.ln2.bias);
        Tensor f = ffn_forward(x, layer.ffn);
        x = layer_norm(add(x, maybe_dropout(f, cfg_.dropout, ctx)), layer.ln3.gain,
                       layer.ln3.bias);
    }
    return x;
}

Tensor Model::fuse_latents(const Tensor& h_top, const std::vector<Tensor>& zs) const {
    if (stage_ != 2) throw ContractError("latent fusion exists only in stage-2 models");
    if (int(zs.size()) != active_.count())
        throw ContractError("fusion expects " + std::to_string(active_.count()) +
                            " latent samples, got " + std::to_string(zs.size()));
    if (h_top.rank() != 3 || h_top.dim(2) != cfg_.d)
        throw ShapeError("fusion input must be (batch, time, d)");
    int steps = h_top.dim(1);
    std::vector<Tensor> parts = {h_top};
    for (const Tensor& z : zs) {
        if (z.rank() != 2 || z.dim(0) != h_top.dim(0) || z.dim(1) != cfg_.d_z)
            throw ShapeError("latent sample must be (batch, d_z)");
        parts.push_back(tile_dim1(z, steps));
    }
    Tensor cat = parts.size() == 1 ? parts[0] : concat_last_dim(parts);
    return tanh(add(matmul(cat, w_fuse_, false, true), b_fuse_));
}

Tensor Model::output_logits(const Tensor& states) const {
    return add(matmul(states, w_out_, false, true), b_out_);
}

Tensor Model::output_probabilities(const Tensor& states) const {
    return softmax_last_dim(output_logits(states));
}

const LatentModule& Model::latent(LatentKind kind) const {
    for (const LatentModule& mod : latents_)
        if (mod.kind == kind) return mod;
    throw ContractError("latent '" + to_string(kind) + "' is not active in this model");
}

Tensor pool_masked_mean(const Tensor& h, const PaddedSeq& seq) {
    std::vector<double> m = seq.mask;
    return mean_masked(h, Tensor::from_data(std::move(m), {seq.rows, seq.cols}));
}

}  // namespace chatnmt
