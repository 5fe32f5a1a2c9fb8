#include <benchmark/benchmark.h>

#include <random>

#include "chatnmt/inference.hpp"
#include "chatnmt/train.hpp"

using namespace chatnmt;

namespace {

ModelConfig bench_config(int d) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.d_ff = 4 * d;
    cfg.heads = 4;
    cfg.n_enc = 2;
    cfg.n_dec = 2;
    cfg.d_z = d / 8;
    cfg.vocab_size = 256;
    cfg.num_roles = 2;
    cfg.max_turns = 8;
    cfg.max_positions = 64;
    cfg.dropout = 0.0;
    cfg.label_smoothing = 0.1;
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

std::vector<ChatExample> bench_examples(int count, int len) {
    std::mt19937_64 gen(3);
    std::uniform_int_distribution<int> word(6, 255);
    std::vector<ChatExample> out;
    for (int i = 0; i < count; ++i) {
        auto rand_tokens = [&] {
            std::vector<int> t(static_cast<size_t>(len));
            for (int& x : t) x = word(gen);
            return t;
        };
        ChatExample ex;
        ex.dialogue_id = "b";
        ex.turn = 2;
        ex.x_u = utt(rand_tokens(), 0, 2, Side::source);
        ex.y_u = utt(rand_tokens(), 0, 2, Side::target);
        ex.c_role = {utt(rand_tokens(), 0, 0, Side::source)};
        ex.c_x = {utt(rand_tokens(), 0, 0, Side::source), utt(rand_tokens(), 1, 1, Side::source)};
        ex.c_y = {utt(rand_tokens(), 0, 0, Side::target), utt(rand_tokens(), 1, 1, Side::target)};
        out.push_back(std::move(ex));
    }
    return out;
}

void BM_matmul(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Rng rng(1);
    Tensor a = Tensor::randn({n, n}, rng);
    Tensor b = Tensor::randn({n, n}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * int64_t(n) * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_softmax_backward(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Rng rng(2);
    for (auto _ : state) {
        Tensor x = Tensor::randn({8, n}, rng, 1.0, true);
        Tensor loss = sum_all(log_softmax_last_dim(x));
        backward(loss);
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_softmax_backward)->Arg(256)->Arg(1024);

void BM_encoder_forward(benchmark::State& state) {
    ModelConfig cfg = bench_config(static_cast<int>(state.range(0)));
    Rng rng(4);
    Model m(cfg, 1, LatentSet::none(), rng);
    Batch batch = make_batch(bench_examples(8, 12));
    for (auto _ : state) {
        Tensor h = m.encode(m.embed(batch.x), batch.x, {});
        benchmark::DoNotOptimize(h.data().data());
    }
    state.SetItemsProcessed(state.iterations() * batch.x.rows * batch.x.cols);
}
BENCHMARK(BM_encoder_forward)->Arg(64)->Arg(128);

void BM_stage2_step(benchmark::State& state) {
    ModelConfig cfg = bench_config(static_cast<int>(state.range(0)));
    Rng rng(5);
    Model m(cfg, 2, LatentSet::all(), rng);
    Batch batch = make_batch(bench_examples(8, 12));
    ParamList params = m.named_parameters();
    for (auto _ : state) {
        zero_grads(params);
        LossBreakdown lb = stage2_objective(m, batch, 0.5, {}, zero_noise());
        backward(lb.loss);
        benchmark::DoNotOptimize(lb.loss.item());
    }
    state.SetItemsProcessed(state.iterations() * batch.target_tokens);
}
BENCHMARK(BM_stage2_step)->Arg(64)->Arg(128);

void BM_beam_search(benchmark::State& state) {
    ModelConfig cfg = bench_config(64);
    Rng rng(6);
    Model m(cfg, 2, LatentSet::all(), rng);
    ChatExample ex = bench_examples(1, 12)[0];
    BeamConfig bc;
    bc.beam_size = static_cast<int>(state.range(0));
    bc.max_length = 16;
    for (auto _ : state) {
        Hypothesis h = translate_example(m, ex, bc);
        benchmark::DoNotOptimize(h.logp);
    }
}
BENCHMARK(BM_beam_search)->Arg(1)->Arg(4)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
