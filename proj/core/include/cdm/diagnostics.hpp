#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cdm/gmm.hpp"
#include "cdm/losses.hpp"
#include "cdm/rng.hpp"
#include "cdm/sampler.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Per-input record of the shared-noise student/teacher comparison.
struct FidelityRecord {
    double out_gap_sq = 0.0;    // ||f_student - f_teacher||^2 under shared eta
    double jac_gap_sq = 0.0;    // (1/D) sum_d ||v_d^T (J_s - J_t)||^2
    double out_norm_sq = 0.0;   // ||f_student||^2
    double jac_norm_mean = 0.0; // (1/D) sum_d ||v_d^T J_s||
    double r_s = 0.0;
    double r_g = 0.0;
    double ratio = 0.0;  // r_g / r_s
    bool ratio_undefined = false;
    bool outlier = false;
};

struct FidelityAggregates {
    double eps_dist = 0.0;    // RMS output gap
    double eps_g_dist = 0.0;  // RMS directional-Jacobian gap
    double y_bar = 0.0;       // student output RMS
    double j_bar = 0.0;       // student Jacobian RMS (E.7 inner-mean form)
    double r_s = 0.0;
    double r_g = 0.0;
    double ratio = 0.0;
    bool ratio_undefined = false;
};

struct ConfidenceInterval {
    double lo = 0.0, hi = 0.0;
};

struct FidelityReport {
    FidelityAggregates all;
    FidelityAggregates inliers;  // Tukey fence on per-input r_g / r_s applied
    std::vector<FidelityRecord> records;
    int64_t n_directions = 0;
    int64_t outlier_count = 0;
    ConfidenceInterval r_s_ci, r_g_ci, ratio_ci;  // bootstrap over inputs, all records
};

FidelityAggregates recompute_aggregates(const std::vector<FidelityRecord>& records, bool skip_outliers);

// Shared-noise epsilon_dist / epsilon_{g,dist} measurement with VJPs along
// n_directions shared random unit vectors (one backward pass per direction
// and model), Tukey outlier flags, and bootstrap CIs (1000 resamples).
FidelityReport measure_eps(const ConditionalSampler& student, const ConditionalSampler& teacher,
                           const std::vector<Tensor>& inputs, int64_t n_directions, Rng& rng);

// Closed-form population MMD^2 between Gaussian mixtures for RBF-sum kernels
// k(a,b) = sum_l exp(-gamma_l ||a-b||^2); the oracle the concentration and
// bias experiments compare against.
double population_mmd2(const GaussianMixture& p, const GaussianMixture& q, const std::vector<double>& gammas);
std::vector<double> multi_rbf_gammas(double bandwidth);

struct ConcentrationResult {
    std::vector<int64_t> n_grid;
    std::vector<double> rms_error;  // RMS of (estimate - population) per n
    double slope = 0.0;             // log-log fit
    double floor_estimate = 0.0;    // rms at the largest n (bias floor probe)
};

// RMS error of the V-statistic against the population value across sample
// sizes, with a log-log rate fit. sampler_shift injects a mean shift into
// the conditional sampler (biased-sampler floor probe).
ConcentrationResult concentration_experiment(const GaussianMixture& cond, const GaussianMixture& target,
                                             const KernelSpec& kernel, const std::vector<int64_t>& n_grid,
                                             int64_t repeats, double sampler_shift, Rng& rng);

struct GradientBiasVariance {
    Tensor mean_grad;          // mean of the estimator over repeats
    Tensor reference_grad;     // gradient of the population loss
    Tensor bias;               // mean - reference
    Tensor bias_se;            // standard error per coordinate
    std::vector<int64_t> n_grid;
    std::vector<double> variance_per_n;  // mean per-coordinate variance
    double variance_slope = 0.0;
    ConfidenceInterval bias_norm_ci;     // bootstrap CI of ||bias||
};

// Bias and variance of the inner gradient estimator (squared-MMD
// U-statistic, fixed kernel) against a population-gradient reference
// computed by central differences of the closed-form population MMD^2.
GradientBiasVariance gradient_bias_variance(const ConditionalSampler& sampler, const GaussianMixture& cond_law,
                                            const GaussianMixture& target, const Tensor& x_row,
                                            const KernelSpec& fixed_kernel, int64_t n_target,
                                            const std::vector<int64_t>& n_grid, int64_t repeats, Rng& rng);

struct MemoryRatioRow {
    int64_t k_steps = 0;
    int64_t n_cond = 0;
    int64_t tape_nodes = 0;     // total op nodes, per-sample evaluation mode
    int64_t tape_depth = 0;
    int64_t stored_scalars = 0; // total saved forward values (doubles)
    double nodes_per_sample = 0.0;
};

struct MemoryRatioResult {
    std::vector<MemoryRatioRow> teacher_rows;
    MemoryRatioRow student_row;
    std::vector<double> ratio_per_k;  // teacher nodes-per-sample / student nodes-per-sample
    double linear_fit_r2 = 0.0;       // nodes vs k * n_cond
};

// Tape-size accounting for the unrolled teacher at each K against the
// single-step student; conditional samples are evaluated one per tape so
// node counts scale as Theta(K * n_cond).
MemoryRatioResult memory_ratio_experiment(const std::function<Var(Tape&, Var, int64_t, Rng&)>& teacher_at_k,
                                          const std::vector<int64_t>& k_list,
                                          const ConditionalSampler& student, const Tensor& x_row,
                                          int64_t n_cond, Rng& rng);

// 1-D W1 distances used by the sweep checks.
double w1_sorted_samples(std::vector<double> a, std::vector<double> b);
double w1_sample_vs_density(const std::vector<double>& samples, const std::vector<double>& grid,
                            const std::vector<double>& density);

// log-log least-squares slope
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);
double fit_linear_r2(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace cdm
