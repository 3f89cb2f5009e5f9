#pragma once

#include <cstdint>
#include <random>

namespace sdit {

// Deterministic RNG handed around explicitly; no global state.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }

    int64_t integer(int64_t lo, int64_t hi) {  // inclusive range
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(engine_);
    }

    uint64_t next() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
};

}  // namespace sdit
