#include "cdm/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cdm {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Rng::Rng(uint64_t seed) : Rng(seed, 0) {}

Rng::Rng(uint64_t seed, uint64_t stream) {
    uint64_t x = seed;
    (void)splitmix64(x);
    x ^= 0x6a09e667f3bcc909ULL * (stream + 1);
    for (auto& s : state_) s = splitmix64(x);
}

Rng Rng::fork(uint64_t label) const {
    Rng copy = *this;
    uint64_t a = copy.state_[0] ^ rotl(label + 1, 17);
    uint64_t b = copy.state_[2] + 0x9e3779b97f4a7c15ULL * (label + 1);
    uint64_t mix = a;
    Rng child(splitmix64(mix), b);
    return child;
}

Rng Rng::fork(std::string_view label) const { return fork(fnv1a(label)); }

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

int64_t Rng::uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    // rejection keeps the draw unbiased
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<int64_t>(x % un);
}

size_t Rng::categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("categorical: nonpositive weight total");
    double u = uniform() * total;
    for (size_t i = 0; i < weights.size(); ++i) {
        u -= weights[i];
        if (u <= 0.0) return i;
    }
    return weights.size() - 1;
}

std::vector<double> Rng::normal_vec(size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal();
    return out;
}

}  // namespace cdm
