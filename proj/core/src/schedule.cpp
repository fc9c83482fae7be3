#include "cdm/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cdm {

NoiseSchedule NoiseSchedule::cosine(int64_t T, double s) {
    if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    NoiseSchedule ns;
    ns.kind = Kind::cosine;
    ns.T = T;
    ns.cosine_s = s;
    ns.alpha_bar.resize(static_cast<size_t>(T) + 1);
    auto f = [&](double t) {
        const double u = (t / static_cast<double>(T) + s) / (1.0 + s);
        const double c = std::cos(u * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0.0);
    ns.alpha_bar[0] = 1.0;
    for (int64_t t = 1; t <= T; ++t) {
        double ab = f(static_cast<double>(t)) / f0;
        // clip so abar_t / abar_{t-1} >= 1e-3 (beta_t <= 0.999)
        ab = std::max(ab, ns.alpha_bar[static_cast<size_t>(t - 1)] * 1e-3);
        ab = std::min(ab, ns.alpha_bar[static_cast<size_t>(t - 1)]);
        ns.alpha_bar[static_cast<size_t>(t)] = ab;
    }
    ns.validate();
    return ns;
}

NoiseSchedule NoiseSchedule::linear(int64_t T, double beta_min, double beta_max) {
    if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    NoiseSchedule ns;
    ns.kind = Kind::linear;
    ns.T = T;
    ns.alpha_bar.resize(static_cast<size_t>(T) + 1);
    ns.alpha_bar[0] = 1.0;
    for (int64_t t = 1; t <= T; ++t) {
        const double b =
            T == 1 ? beta_min : beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        ns.alpha_bar[static_cast<size_t>(t)] = ns.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - b);
    }
    ns.validate();
    return ns;
}

double NoiseSchedule::abar(int64_t t) const {
    if (t < 0 || t > T) throw std::out_of_range("NoiseSchedule::abar: t out of range");
    return alpha_bar[static_cast<size_t>(t)];
}

double NoiseSchedule::beta(int64_t t) const {
    if (t < 1 || t > T) throw std::out_of_range("NoiseSchedule::beta: t out of range");
    return 1.0 - alpha_bar[static_cast<size_t>(t)] / alpha_bar[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::beta_between(int64_t t, int64_t t_prev) const {
    if (t_prev < 0 || t <= t_prev || t > T) throw std::out_of_range("NoiseSchedule::beta_between: bad step pair");
    return 1.0 - alpha_bar[static_cast<size_t>(t)] / alpha_bar[static_cast<size_t>(t_prev)];
}

double NoiseSchedule::g_sde(int64_t t) const {
    return std::sqrt(static_cast<double>(T) * beta(t));
}

double NoiseSchedule::perturb_scale(int64_t t) const {
    const double g = g_sde(t);
    return g / std::sqrt(1.0 + g * g);
}

void NoiseSchedule::validate() const {
    if (static_cast<int64_t>(alpha_bar.size()) != T + 1)
        throw std::logic_error("NoiseSchedule: alpha_bar size mismatch");
    if (alpha_bar[0] != 1.0) throw std::logic_error("NoiseSchedule: alpha_bar[0] must be 1");
    for (int64_t t = 1; t <= T; ++t) {
        const double ab = alpha_bar[static_cast<size_t>(t)];
        if (!(ab > 0.0 && ab <= 1.0)) throw std::logic_error("NoiseSchedule: alpha_bar out of (0,1]");
        if (ab > alpha_bar[static_cast<size_t>(t - 1)] + 1e-15)
            throw std::logic_error("NoiseSchedule: alpha_bar not nonincreasing");
    }
}

std::string NoiseSchedule::kind_name() const { return kind == Kind::cosine ? "cosine" : "linear"; }

std::vector<int64_t> NoiseSchedule::strided_steps(int64_t n) const {
    if (n < 1 || n > T) throw std::invalid_argument("strided_steps: need 1 <= n <= T");
    std::vector<int64_t> steps(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        // evenly spaced, starting at T, strictly decreasing, ending above 0
        steps[static_cast<size_t>(i)] = T - (i * T) / n;
    }
    return steps;
}

}  // namespace cdm
