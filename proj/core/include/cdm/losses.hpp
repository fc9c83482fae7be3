#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdm/rng.hpp"
#include "cdm/tape.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Kernel choice for the MMD estimators. Bandwidths from the data-dependent
// heuristics are computed on the merged sample and treated as constants with
// respect to gradients.
struct KernelSpec {
    enum class Kind { multi_rbf, generalized_rbf };
    enum class Bandwidth { mean_sq_heuristic, median_heuristic, fixed };

    Kind kind = Kind::multi_rbf;
    Bandwidth bandwidth = Bandwidth::mean_sq_heuristic;
    double sigma = 1.0;  // used when bandwidth == fixed
    double alpha = 1.0;  // generalized_rbf exponent

    void validate() const;

    static KernelSpec multi_rbf_mean_sq();
    static KernelSpec multi_rbf_fixed(double sigma);
    static KernelSpec generalized_rbf_median(double alpha = 1.0);
};

struct LossSpec {
    enum class Kind { mmd_v, mmd_u_sqrt, swd };

    Kind kind = Kind::mmd_v;
    KernelSpec kernel;          // mmd only
    int64_t n_projections = 10; // swd only
    double epsilon = 1e-8;      // mmd_u_sqrt only

    void validate() const;
    std::string kind_name() const;
};

// Bandwidth actually used by a kernel on the merged (cond, target) sample.
// multi_rbf uses the mean pairwise squared distance directly; the median
// heuristic yields 2*sigma^2 = median of cross-pair squared distances.
double resolve_bandwidth(const KernelSpec& k, const Tensor& cond, const Tensor& target);

// Biased V-statistic MMD^2 with a multi-bandwidth (or generalized) RBF
// kernel. Only cond carries gradient; target is detached.
Var mmd_v(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel);

// sqrt(|MMD^2 U-statistic| + eps), diagonal terms excluded. Requires at
// least two points per sample.
Var mmd_u_sqrt(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel, double eps = 1e-8);

// Sliced Wasserstein distance over n_projections random unit directions
// (fresh per call, drawn from rng); equal sample sizes required. In 1-D the
// projection step is skipped.
Var swd(Tape& tape, Var cond, const Tensor& target, int64_t n_projections, Rng& rng);

// SWD against caller-fixed directions (rows of `directions`, one per
// projection); used wherever reproducible projections are needed.
Var swd_with_directions(Tape& tape, Var cond, const Tensor& target, const Tensor& directions);

Var loss_eval(Tape& tape, const LossSpec& spec, Var cond, const Tensor& target, Rng& rng);

// Plain MMD^2 U-statistic without the absolute-value/sqrt stabilization;
// unbiased for population MMD^2 under a fixed kernel.
Var mmd_u_squared(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel);

// Plain (non-differentiable) evaluations on fixed samples.
double mmd_v_value(const Tensor& a, const Tensor& b, const KernelSpec& kernel);
double swd_value(const Tensor& a, const Tensor& b, int64_t n_projections, Rng& rng);
double loss_value(const LossSpec& spec, const Tensor& a, const Tensor& b, Rng& rng);

// Sample a row-matrix of uniformly distributed unit vectors.
Tensor random_unit_directions(int64_t count, int64_t dim, Rng& rng);

}  // namespace cdm
