#pragma once

#include <cstdint>
#include <random>

namespace chatnmt {

/// Deterministic random stream. Every stochastic operation in the library
/// (weight init, dropout, latent noise, corpus shuffling) takes one of these
/// explicitly so that a run is fully reproducible from its seed.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(mix(seed)) {}

    double normal() { return normal_(gen_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    /// Uniform integer in [0, n).
    uint64_t index(uint64_t n) {
        return std::uniform_int_distribution<uint64_t>(0, n - 1)(gen_);
    }
    bool bernoulli(double p_true) {
        return std::bernoulli_distribution(p_true)(gen_);
    }

    /// Derives an independent child stream from the construction seed.
    /// Stable no matter how many numbers were already drawn from this one.
    Rng child(uint64_t salt) const { return Rng(mix(seed_ ^ mix(salt))); }

    uint64_t seed() const { return seed_; }
    std::mt19937_64& engine() { return gen_; }

private:
    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t seed_;
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace chatnmt
