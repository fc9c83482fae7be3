#pragma once

#include <cstdint>
#include <vector>

#include "cdm/diffusion.hpp"
#include "cdm/net.hpp"
#include "cdm/rng.hpp"
#include "cdm/tape.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Improved Consistency Training setup. sigma_max and sigma_data default to
// data-derived values (80 x std and the empirical std) when left at zero.
struct IctConfig {
    int64_t s0 = 10;
    int64_t s1 = 1280;
    int64_t curriculum_period = 0;  // 0: total_steps / (log2(s1/s0) + 1)
    double sigma_min = 0.002;
    double sigma_max = 0.0;
    double sigma_data = 0.0;
    double p_mean = -1.1;
    double p_std = 2.0;
    double rho = 7.0;
    double huber_c_factor = 0.00054;  // c = factor * sqrt(dy) * sigma_data
    std::vector<double> sampling_levels = {150.0, 50.0, 20.0, 10.0, 5.0, 1.0};

    void validate() const;
};

// MLP backbone plus the iCT skip/output scalings; the map is the identity at
// sigma_min by construction (c_skip = 1, c_out = 0 there).
struct ConsistencyModel {
    MlpNet net;
    IctConfig cfg;

    double c_skip(double sigma) const;
    double c_out(double sigma) const;
    double c_in(double sigma) const;

    // f(y, sigma | x) at one noise level shared across the batch; x may be
    // invalid for unconditional models.
    Var apply(Tape& tape, Var y, double sigma, Var x, std::vector<Var>* param_vars = nullptr) const;
    // per-row noise levels (training)
    Var apply_rows(Tape& tape, Var y, const std::vector<double>& sigma, Var x,
                   std::vector<Var>* param_vars = nullptr) const;

    // Multistep consistency sampling along the configured (or given) levels,
    // recorded on the tape with gradient to x; single-step = one level.
    Var sample(Tape& tape, Var x, int64_t n, const std::vector<double>& levels, Rng& rng) const;
    Tensor sample_value(const Tensor& x_rows, const std::vector<double>& levels, Rng& rng) const;

    std::vector<double> single_step_levels() const;  // largest level only
};

// N(k) = min(s0 * 2^floor(k / K'), s1) + 1
int64_t ict_curriculum_size(const IctConfig& cfg, int64_t step, int64_t total_steps);

// Karras boundaries: ascending noise levels sigma_1 = sigma_min ... sigma_N.
std::vector<double> karras_boundaries(double sigma_min, double sigma_max, int64_t count, double rho);

// Discretized log-normal proposal over adjacent boundary pairs: index i gets
// the log-normal mass of [sigma_i, sigma_{i+1}).
std::vector<double> noise_index_weights(const std::vector<double>& boundaries, double p_mean, double p_std);

// sqrt(||a-b||^2 + c^2) - c over the whole residual.
Var pseudo_huber(Tape& tape, Var a, Var b, double c);
// per-row pseudo-Huber distances (n x 1) for weighted training losses
Var pseudo_huber_rows(Tape& tape, Var a, Var b, double c);

// Trains the consistency model with the iCT recipe: curriculum
// discretization, shared-noise adjacent pairs, stop-gradient self-teacher,
// pseudo-Huber loss with 1/(t_{n+1}-t_n) weighting.
TrainResult ict_train(const BatchSampler& data, ConsistencyModel& model, const TrainConfig& cfg, Rng& rng);

}  // namespace cdm
