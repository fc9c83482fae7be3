#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace cdm {

// Deterministic xoshiro256** stream with splitmix64 seeding. Streams forked
// from a master seed are independent and stable across platforms, which is
// what makes run artifacts byte-reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed);
    Rng(uint64_t seed, uint64_t stream);

    // Derives an independent child stream. The label keeps forks for
    // different purposes (training, restarts, projections) from colliding.
    Rng fork(uint64_t label) const;
    Rng fork(std::string_view label) const;

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double normal();                        // standard normal, Box-Muller
    double normal(double mean, double stddev);
    int64_t uniform_int(int64_t n);         // [0, n)
    size_t categorical(const std::vector<double>& weights);

    std::vector<double> normal_vec(size_t n);

private:
    uint64_t state_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

}  // namespace cdm
