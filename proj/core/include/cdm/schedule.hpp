#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cdm {

// Discrete {alpha_bar_t} schedule with the per-step quantities the samplers
// and the guidance engine derive from it. Index t runs 1..T with
// alpha_bar(0) == 1 (clean data).
struct NoiseSchedule {
    enum class Kind { cosine, linear };

    Kind kind = Kind::cosine;
    int64_t T = 100;
    double cosine_s = 0.008;
    std::vector<double> alpha_bar;  // size T+1, alpha_bar[0] = 1

    static NoiseSchedule cosine(int64_t T, double s = 0.008);
    static NoiseSchedule linear(int64_t T, double beta_min = 1e-4, double beta_max = 0.02);

    double abar(int64_t t) const;
    // discrete per-step beta_t = 1 - abar_t / abar_{t-1}
    double beta(int64_t t) const;
    // beta aggregated over a strided step from t down to t_prev
    double beta_between(int64_t t, int64_t t_prev) const;
    // VP-form diffusion coefficient g(t) = sqrt(T * beta_t), tabulated per
    // discrete step; feeds both the SDE update and the MC perturbation scale
    double g_sde(int64_t t) const;
    // MC perturbation std g/sqrt(1+g^2), always in (0,1)
    double perturb_scale(int64_t t) const;

    void validate() const;
    std::string kind_name() const;

    // descending timestep sequence with n entries ending at the final step
    // (plain DDIM striding), e.g. T=100, n=4 -> {100, 75, 50, 25}
    std::vector<int64_t> strided_steps(int64_t n) const;
};

}  // namespace cdm
