#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <vector>

#include "chatnmt/checkpoint.hpp"
#include "chatnmt/error.hpp"
#include "chatnmt/train.hpp"
#include "chatnmt/vocab.hpp"
#include "doctest.h"
#include "grad_check.hpp"
#include "nlohmann/json.hpp"

using namespace chatnmt;

namespace {

ModelConfig tiny_config(int vocab = 12) {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.d_ff = 16;
    cfg.heads = 2;
    cfg.n_enc = 1;
    cfg.n_dec = 1;
    cfg.d_z = 2;
    cfg.vocab_size = vocab;
    cfg.num_roles = 2;
    cfg.max_turns = 4;
    cfg.max_positions = 32;
    cfg.dropout = 0.0;
    cfg.label_smoothing = 0.0;
    return cfg;
}

Utterance utt(std::vector<int> tokens, int role, int turn, Side side) {
    Utterance u;
    u.tokens = std::move(tokens);
    u.role_id = role;
    u.turn_index = turn;
    u.side = side;
    return u;
}

// Two chat examples with non-empty role/source/target contexts.
std::vector<ChatExample> toy_examples() {
    std::vector<ChatExample> out;
    ChatExample a;
    a.dialogue_id = "d0";
    a.turn = 2;
    a.x_u = utt({6, 7, 8}, 0, 2, Side::source);
    a.y_u = utt({9, 10}, 0, 2, Side::target);
    a.c_role = {utt({7, 9}, 0, 0, Side::source)};
    a.c_x = {utt({7, 9}, 0, 0, Side::source), utt({10, 6}, 1, 1, Side::source)};
    a.c_y = {utt({8}, 0, 0, Side::target), utt({6, 7}, 1, 1, Side::target)};
    out.push_back(a);

    ChatExample b;
    b.dialogue_id = "d0";
    b.turn = 3;
    b.x_u = utt({10, 9}, 1, 3, Side::source);
    b.y_u = utt({6, 8, 7}, 1, 3, Side::target);
    b.c_role = {utt({10, 6}, 1, 1, Side::source)};
    b.c_x = {utt({7, 9}, 0, 0, Side::source), utt({10, 6}, 1, 1, Side::source),
             utt({6, 6}, 0, 2, Side::source)};
    b.c_y = {utt({8}, 0, 0, Side::target), utt({6, 7}, 1, 1, Side::target),
             utt({9, 10}, 0, 2, Side::target)};
    out.push_back(b);
    return out;
}

Tensor find_param(const Model& m, const std::string& name) {
    for (const auto& p : m.named_parameters())
        if (p.name == name) return p.tensor;
    REQUIRE_MESSAGE(false, "missing parameter " << name);
    return {};
}

// Independent per-token oracle: read the model's output probabilities and
// fold the smoothed target distribution over them with plain double loops.
double smoothed_ce_oracle(const Tensor& probs, const PaddedSeq& y_out, double eps, int vocab,
                          double* plain = nullptr) {
    double total = 0.0, plain_total = 0.0;
    long count = 0;
    for (int r = 0; r < y_out.rows; ++r)
        for (int c = 0; c < y_out.cols; ++c) {
            size_t i = size_t(r) * y_out.cols + c;
            if (y_out.mask[i] == 0.0) continue;
            ++count;
            int tgt = y_out.ids[i];
            for (int k = 0; k < vocab; ++k) {
                double q = k == tgt ? 1.0 - eps : eps / double(vocab - 1);
                total -= q * std::log(probs.data()[i * vocab + k]);
            }
            plain_total -= std::log(probs.data()[i * vocab + tgt]);
        }
    if (plain) *plain = plain_total / double(count);
    return total / double(count);
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    TrainConfig bad = cfg;
    bad.stage = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.anneal_steps = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.batch_tokens = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_steps = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.lr_scale = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("annealing is the clamped linear ramp") {
    CHECK(kl_anneal(0, 10000) == 0.0);
    CHECK(kl_anneal(10000, 10000) == 1.0);
    CHECK(kl_anneal(20000, 10000) == 1.0);
    CHECK(kl_anneal(5000, 10000) == doctest::Approx(0.5).epsilon(1e-15));
    double prev = -1.0;
    for (long s = 0; s <= 12000; s += 37) {
        double v = kl_anneal(s, 10000);
        CHECK(v >= prev);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        prev = v;
    }
    CHECK_THROWS_AS(kl_anneal(-1, 100), ContractError);
    CHECK_THROWS_AS(kl_anneal(5, 0), ContractError);
}

TEST_CASE("uniform outputs give ln V regardless of smoothing") {
    for (double eps : {0.0, 0.1}) {
        ModelConfig cfg = tiny_config();
        cfg.label_smoothing = eps;
        Rng rng(3);
        Model m(cfg, 1, LatentSet::all(), rng);
        // Zero the output projection: logits identically 0, probabilities 1/V.
        Tensor w = find_param(m, "out.w");
        for (double& v : w.mutable_data()) v = 0.0;
        Batch batch = make_batch(toy_examples());
        LossBreakdown lb = stage1_loss(m, batch, {});
        CHECK(lb.loss.item() == doctest::Approx(std::log(12.0)).epsilon(1e-12));
        CHECK(lb.ce == doctest::Approx(std::log(12.0)).epsilon(1e-12));
        CHECK(lb.target_tokens == batch.target_tokens);
    }
}

TEST_CASE("near-one-hot outputs drive the unsmoothed loss to zero") {
    ModelConfig cfg = tiny_config();
    cfg.n_enc = 0;
    cfg.n_dec = 0;
    Rng rng(5);
    Model m(cfg, 1, LatentSet::all(), rng);
    Tensor w = find_param(m, "out.w");
    for (double& v : w.mutable_data()) v = 0.0;
    Tensor b = find_param(m, "out.b");

    // Single-token target: y_out = [9, eos]; bias both ids sky-high is
    // impossible (one row per position shares b_o), so use a 1-token target
    // whose single real position is the only scored one... eos is scored too.
    // Instead: batch with target = [9], so y_out rows are [9, eos]; give both
    // 9 and eos huge logits and check the loss is tiny but not zero-target.
    // Cleaner: make every scored position's target the same id.
    std::vector<ChatExample> exs;
    ChatExample e;
    e.dialogue_id = "d";
    e.turn = 0;
    e.x_u = utt({6}, 0, 0, Side::source);
    e.y_u = utt({9}, 0, 0, Side::target);
    exs.push_back(e);
    Batch batch = make_batch(exs);
    // Scored targets: 9 then eos. Drive both their biases up; they appear in
    // different positions, and with W_o = 0 the distribution is shared, so
    // max achievable per-position probability is 1/2 each. Loss floor ln 2.
    b.mutable_data()[9] = 60.0;
    b.mutable_data()[Vocabulary::kEos] = 60.0;
    LossBreakdown lb = stage1_loss(m, batch, {});
    CHECK(lb.loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("smoothed cross-entropy matches the direct-formula oracle") {
    ModelConfig cfg = tiny_config();
    cfg.label_smoothing = 0.1;
    Rng rng(11);
    Model m(cfg, 1, LatentSet::all(), rng);
    Batch batch = make_batch(toy_examples());
    LossBreakdown lb = stage1_loss(m, batch, {});

    // Recompute from probabilities with an independent loop.
    Tensor h_enc = m.encode(m.embed(batch.x), batch.x, {});
    Tensor h_dec = m.decode(m.embed(batch.y_in), batch.y_in, h_enc, batch.x, {});
    Tensor probs = m.output_probabilities(h_dec);
    double plain = 0.0;
    double expect = smoothed_ce_oracle(probs, batch.y_out, 0.1, 12, &plain);
    CHECK(lb.loss.item() == doctest::Approx(expect).epsilon(1e-9));
    CHECK(lb.ce == doctest::Approx(plain).epsilon(1e-9));

    Rng rng2(11);
    Model stage2(tiny_config(), 2, LatentSet::all(), rng2);
    CHECK_THROWS_AS(stage1_loss(stage2, batch, FwdCtx{}), ContractError);
}

TEST_CASE("stage-2 objective composes CE and annealed KL terms") {
    ModelConfig cfg = tiny_config();
    cfg.label_smoothing = 0.1;
    Rng rng(21);
    Model m(cfg, 2, LatentSet::all(), rng);
    Batch batch = make_batch(toy_examples());

    LossBreakdown at0 = stage2_objective(m, batch, 0.0, {}, zero_noise());
    LossBreakdown at7 = stage2_objective(m, batch, 0.7, {}, zero_noise());
    REQUIRE(at0.kl_per_word.size() == 3);
    REQUIRE(at7.kl_per_word.size() == 3);
    CHECK(at0.kl_per_word[0].first == LatentKind::role);
    CHECK(at0.kl_per_word[1].first == LatentKind::dia);
    CHECK(at0.kl_per_word[2].first == LatentKind::tra);
    for (const auto& [kind, v] : at7.kl_per_word) CHECK(v >= 0.0);

    // Hand-assemble the objective from public pieces: encoder/pooling reps,
    // latent forwards, closed-form KLs, and the probability-space CE oracle.
    Tensor h_enc = m.encode(m.embed(batch.x), batch.x, {});
    Tensor h_x = pool_masked_mean(h_enc, batch.x);
    Tensor h_cr = m.encode_context(batch.ctx_role, {});
    Tensor h_cx = m.encode_context(batch.ctx_x, {});
    Tensor h_cy = m.encode_context(batch.ctx_y, {});
    Tensor h_y = pool_masked_mean(m.encode(m.embed(batch.y_out), batch.y_out, {}), batch.y_out);

    double kl_total = 0.0;
    std::vector<Tensor> zs;
    std::vector<std::vector<Tensor>> reps = {{h_x, h_cr}, {h_x, h_cx}, {h_x, h_cx, h_cy}};
    std::vector<LatentKind> kinds = {LatentKind::role, LatentKind::dia, LatentKind::tra};
    for (size_t i = 0; i < kinds.size(); ++i) {
        GaussianParams p = prior_forward(kinds[i], m.latent(kinds[i]).prior, reps[i]);
        GaussianParams q = posterior_forward(kinds[i], m.latent(kinds[i]).posterior, reps[i], h_y);
        zs.push_back(q.mu);  // zero noise -> z is the posterior mean
        double kl = kl_divergence(q, p).item();
        kl_total += kl;
        CHECK(at7.kl_per_word[i].second ==
              doctest::Approx(kl / double(batch.target_tokens)).epsilon(1e-9));
    }
    Tensor h_dec = m.decode(m.embed(batch.y_in), batch.y_in, h_enc, batch.x, {});
    Tensor probs = m.output_probabilities(m.fuse_latents(h_dec, zs));
    double plain = 0.0;
    double ce = smoothed_ce_oracle(probs, batch.y_out, 0.1, 12, &plain);

    CHECK(at0.loss.item() == doctest::Approx(ce).epsilon(1e-9));
    CHECK(at0.ce == doctest::Approx(plain).epsilon(1e-9));
    CHECK(at7.loss.item() ==
          doctest::Approx(ce + 0.7 * kl_total / double(batch.target_tokens)).epsilon(1e-9));
    CHECK(at7.lambda == 0.7);

    Rng rng2(21);
    Model stage1(cfg, 1, LatentSet::all(), rng2);
    CHECK_THROWS_AS(stage2_objective(stage1, batch, 0.5, FwdCtx{}, zero_noise()), ContractError);
}

TEST_CASE("posterior mirroring the prior zeroes every KL term") {
    ModelConfig cfg = tiny_config();
    Rng rng(31);
    Model m(cfg, 2, LatentSet::all(), rng);
    int d = cfg.d;
    for (LatentKind kind : kAllLatentKinds) {
        const LatentModule& mod = m.latent(kind);
        int in_prior = mod.prior.w1.dim(1);
        Tensor pw1 = mod.prior.w1, qw1 = mod.posterior.w1;
        // Copy the prior's input block; zero the appended h_y block.
        for (int r = 0; r < d; ++r) {
            for (int c = 0; c < in_prior; ++c)
                qw1.mutable_data()[size_t(r) * (in_prior + d) + c] =
                    pw1.data()[size_t(r) * in_prior + c];
            for (int c = in_prior; c < in_prior + d; ++c)
                qw1.mutable_data()[size_t(r) * (in_prior + d) + c] = 0.0;
        }
        for (size_t i = 0; i < mod.prior.b1.numel(); ++i)
            Tensor(mod.posterior.b1).mutable_data()[i] = mod.prior.b1.data()[i];
        for (size_t i = 0; i < mod.prior.w2.numel(); ++i)
            Tensor(mod.posterior.w2).mutable_data()[i] = mod.prior.w2.data()[i];
        for (size_t i = 0; i < mod.prior.b2.numel(); ++i)
            Tensor(mod.posterior.b2).mutable_data()[i] = mod.prior.b2.data()[i];
    }
    Batch batch = make_batch(toy_examples());
    LossBreakdown lb = stage2_objective(m, batch, 1.0, {}, zero_noise());
    for (const auto& [kind, v] : lb.kl_per_word) CHECK(v == 0.0);

    LossBreakdown at0 = stage2_objective(m, batch, 0.0, {}, zero_noise());
    CHECK(lb.loss.item() == doctest::Approx(at0.loss.item()).epsilon(1e-12));
}

TEST_CASE("ablated objectives carry exactly the surviving KL terms") {
    ModelConfig cfg = tiny_config();
    Batch batch = make_batch(toy_examples());
    for (int bits = 0; bits < 8; ++bits) {
        LatentSet active{bool(bits & 1), bool(bits & 2), bool(bits & 4)};
        Rng rng(40 + bits);
        Model m(cfg, 2, active, rng);
        LossBreakdown lb = stage2_objective(m, batch, 0.5, {}, zero_noise());
        CHECK(int(lb.kl_per_word.size()) == active.count());
        for (size_t i = 0; i < lb.kl_per_word.size(); ++i)
            CHECK(active.has(lb.kl_per_word[i].first));
        CHECK(std::isfinite(lb.loss.item()));
    }
}

TEST_CASE("stage-2 gradients match finite differences end to end") {
    ModelConfig cfg = tiny_config(11);
    cfg.d_z = 4;
    Rng rng(55);
    Model m(cfg, 2, LatentSet::all(), rng);
    Batch batch = make_batch(toy_examples());

    // Fixed nonzero noise so sigma gradients flow through the samples too.
    std::map<LatentKind, Tensor> bank;
    Rng noise_rng(99);
    for (LatentKind k : kAllLatentKinds)
        bank.emplace(k, Tensor::randn({batch.x.rows, cfg.d_z}, noise_rng));
    NoiseSource fixed = [&bank](LatentKind k, int, int) { return bank.at(k); };

    auto make_loss = [&]() { return stage2_objective(m, batch, 0.5, {}, fixed).loss; };
    testutil::check_grads_fd(m.named_parameters(), make_loss, 1e-4, 1e-5);
}

TEST_CASE("training is deterministic and reduces the loss") {
    ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.stage = 1;
    tc.max_steps = 12;
    tc.batch_tokens = 16;
    tc.seed = 77;
    tc.warmup_steps = 10;
    tc.lr_scale = 2.0;
    std::vector<ChatExample> examples = toy_examples();

    auto run = [&]() {
        Rng rng(123);
        Model m(cfg, 1, LatentSet::all(), rng);
        std::ostringstream log;
        TrainHooks hooks;
        hooks.report_log = &log;
        TrainResult r = train(m, examples, tc, hooks);
        return std::pair<std::string, TrainResult>(log.str(), std::move(r));
    };
    auto [log1, r1] = run();
    auto [log2, r2] = run();
    CHECK(log1 == log2);  // bit-identical logs, tokens/sec excluded
    REQUIRE(r1.reports.size() == 12);
    CHECK(r1.reports.back().loss == r2.reports.back().loss);
    CHECK(r1.steps == 12);

    // Optimization makes progress on this trivially small problem.
    CHECK(r1.reports.back().loss < r1.reports.front().loss);
    for (const StepReport& rep : r1.reports) {
        CHECK(rep.grad_norm > 0.0);
        CHECK(rep.lr > 0.0);
        CHECK(rep.kl_per_word.empty());  // stage 1 has no KL fields
    }
}

TEST_CASE("stage-2 training logs one KL field per active latent") {
    ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.stage = 2;
    tc.max_steps = 3;
    tc.batch_tokens = 64;
    tc.anneal_steps = 4;
    tc.disabled.set(LatentKind::role, true);
    tc.disabled.set(LatentKind::tra, true);
    LatentSet active = LatentSet::none();
    active.set(LatentKind::dia, true);
    Rng rng(9);
    Model m(cfg, 2, active, rng);
    std::ostringstream log;
    TrainHooks hooks;
    hooks.report_log = &log;
    TrainResult r = train(m, toy_examples(), tc, hooks);
    REQUIRE(r.reports.size() == 3);
    for (const StepReport& rep : r.reports) {
        REQUIRE(rep.kl_per_word.size() == 1);
        CHECK(rep.kl_per_word[0].first == LatentKind::dia);
        CHECK(rep.kl_per_word[0].second >= 0.0);
    }
    // Lambda ramps with the 4-step anneal: 1/4, 2/4, 3/4.
    CHECK(r.reports[0].lambda == doctest::Approx(0.25));
    CHECK(r.reports[1].lambda == doctest::Approx(0.5));
    CHECK(r.reports[2].lambda == doctest::Approx(0.75));

    std::istringstream lines(log.str());
    std::string line;
    while (std::getline(lines, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.contains("kl_dia"));
        CHECK_FALSE(j.contains("kl_role"));
        CHECK_FALSE(j.contains("kl_tra"));
        CHECK_FALSE(j.contains("tokens_per_sec"));
    }

    // Mismatched ablation config vs model -> refused.
    TrainConfig wrong = tc;
    wrong.disabled = LatentSet::none();
    CHECK_THROWS_AS(train(m, toy_examples(), wrong, TrainHooks{}), ConfigError);
}

TEST_CASE("zero steps write the initial parameters unchanged") {
    ModelConfig cfg = tiny_config();
    Rng rng(61);
    Model m(cfg, 1, LatentSet::all(), rng);
    std::vector<std::vector<double>> before;
    for (const auto& p : m.named_parameters())
        before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

    TempDir dir("chatnmt_train_zero");
    TrainConfig tc;
    tc.stage = 1;
    tc.max_steps = 0;
    TrainHooks hooks;
    hooks.checkpoint_dir = dir.str();
    TrainResult r = train(m, toy_examples(), tc, hooks);
    CHECK(r.steps == 0);

    CheckpointImage image = load_checkpoint(dir.str() + "/ckpt-final.bin");
    ParamList params = m.named_parameters();
    REQUIRE(image.tensors.size() == params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const TensorEntry* e = image.find(params[i].name);
        REQUIRE(e != nullptr);
        REQUIRE(e->data.size() == before[i].size());
        for (size_t j = 0; j < before[i].size(); ++j) CHECK(e->data[j] == before[i][j]);
    }
}

TEST_CASE("checkpoint cadence writes periodic images") {
    ModelConfig cfg = tiny_config();
    Rng rng(62);
    Model m(cfg, 1, LatentSet::all(), rng);
    TempDir dir("chatnmt_train_cadence");
    TrainConfig tc;
    tc.stage = 1;
    tc.max_steps = 5;
    tc.batch_tokens = 16;
    tc.checkpoint_every = 2;
    TrainHooks hooks;
    hooks.checkpoint_dir = dir.str();
    train(m, toy_examples(), tc, hooks);
    CHECK(std::filesystem::exists(dir.path / "ckpt-2.bin"));
    CHECK(std::filesystem::exists(dir.path / "ckpt-4.bin"));
    CHECK(std::filesystem::exists(dir.path / "ckpt-final.bin"));
    CHECK_FALSE(std::filesystem::exists(dir.path / "ckpt-3.bin"));

    long step = 0;
    Model mid = load_model((dir.path / "ckpt-2.bin").string(), &step);
    CHECK(step == 2);
    CHECK(mid.stage() == 1);
}

TEST_CASE("model save/load round trip preserves everything") {
    ModelConfig cfg = tiny_config();
    Rng rng(71);
    Model m(cfg, 2, LatentSet{true, false, true}, rng);
    TempDir dir("chatnmt_model_io");
    std::string path = dir.str() + "/model.bin";
    save_model(m, path, 42);

    long step = 0;
    Model loaded = load_model(path, &step);
    CHECK(step == 42);
    CHECK(loaded.stage() == 2);
    CHECK(loaded.config() == cfg);
    CHECK(loaded.active_latents() == (LatentSet{true, false, true}));
    ParamList a = m.named_parameters(), b = loaded.named_parameters();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        REQUIRE(a[i].tensor.numel() == b[i].tensor.numel());
        for (size_t j = 0; j < a[i].tensor.numel(); ++j)
            CHECK(a[i].tensor.data()[j] == b[i].tensor.data()[j]);
    }
}

TEST_CASE("stage-2 initialization pulls the stage-1 backbone only") {
    ModelConfig cfg = tiny_config();
    Rng rng1(81);
    Model stage1(cfg, 1, LatentSet::all(), rng1);
    TempDir dir("chatnmt_stage_io");
    std::string path = dir.str() + "/stage1.bin";
    save_model(stage1, path, 100);

    Rng rng2(82);
    Model stage2(cfg, 2, LatentSet::all(), rng2);
    std::vector<double> fresh_fuse(find_param(stage2, "fuse.w").data().begin(),
                                   find_param(stage2, "fuse.w").data().end());
    init_stage2_from_stage1(stage2, path);

    // Backbone copied bit-exactly.
    for (const char* name : {"embed.we", "enc.0.self.wq", "dec.0.cross.wo", "out.w"}) {
        Tensor a = find_param(stage1, name), b = find_param(stage2, name);
        REQUIRE(a.numel() == b.numel());
        for (size_t j = 0; j < a.numel(); ++j) CHECK(a.data()[j] == b.data()[j]);
    }
    // Fusion weights keep their fresh initialization.
    Tensor fuse = find_param(stage2, "fuse.w");
    for (size_t j = 0; j < fuse.numel(); ++j) CHECK(fuse.data()[j] == fresh_fuse[j]);

    // A stage-2 file is rejected as a stage-1 source.
    std::string p2 = dir.str() + "/stage2.bin";
    save_model(stage2, p2, 0);
    Rng rng3(83);
    Model another(cfg, 2, LatentSet::all(), rng3);
    CHECK_THROWS_AS(init_stage2_from_stage1(another, p2), LoadError);

    // Backbone dimension mismatch is reported by field name.
    ModelConfig other = cfg;
    other.d = 16;
    other.heads = 4;
    Rng rng4(84);
    Model wide(other, 2, LatentSet::all(), rng4);
    try {
        init_stage2_from_stage1(wide, path);
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        std::string msg = e.what();
        CHECK(msg.find("d ") != std::string::npos);
        CHECK(msg.find("heads") != std::string::npos);
    }
}
