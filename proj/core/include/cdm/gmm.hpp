#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Finite Gaussian mixture. Weights sum to one and every covariance must be
// symmetric positive definite (checked via Cholesky).
struct GaussianMixture {
    std::vector<double> weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covariances;

    size_t components() const { return weights.size(); }
    int64_t dim() const { return means.empty() ? 0 : means[0].size(); }

    void validate() const;
    double pdf(const Eigen::VectorXd& point) const;
    double log_pdf_component(size_t k, const Eigen::VectorXd& point) const;

    Tensor sample(int64_t n, Rng& rng) const;  // n x d matrix of i.i.d. draws
    Eigen::VectorXd sample_one(Rng& rng) const;

    Eigen::VectorXd mean() const;

    static GaussianMixture single(Eigen::VectorXd mean, Eigen::MatrixXd cov);
};

// Disjoint partition of the joint dimensions into the X and Y blocks.
struct SplitIndex {
    std::vector<int64_t> x_dims;
    std::vector<int64_t> y_dims;

    void validate(int64_t total_dim) const;
};

// Marginal of the mixture over the given dimensions.
GaussianMixture marginalize(const GaussianMixture& joint, const std::vector<int64_t>& dims);

// Exact conditional P(Y | X = x) by Schur complement, with components whose
// normalized conditional weight falls below weight_floor dropped and the
// remainder renormalized.
GaussianMixture condition(const GaussianMixture& joint, const SplitIndex& split, const Eigen::VectorXd& x,
                          double weight_floor);

// Exact L2 function-space distance between mixture densities via the
// Gaussian-Gaussian inner product <N(m1,S1), N(m2,S2)> = N(m1; m2, S1+S2).
double l2_gmm_distance(const GaussianMixture& p, const GaussianMixture& q);

// Tilted posterior Q_beta(x) proportional to P(x) exp(-beta L(x)) on a 1-D
// prior; densities are normalized by trapezoid rule on the evaluation grid.
struct TiltedPosterior {
    GaussianMixture prior;  // 1-D mixture over X
    double beta = 0.0;
    std::function<double(double)> loss;
};

std::vector<double> tilted_density(const TiltedPosterior& tp, const std::vector<double>& grid);

// Uniform grid [x_star - 10, x_star + 10] with 2001 points, the reference
// grid for Q_beta normalization in the 1-D sweep setting.
std::vector<double> tilted_reference_grid(double x_star);

// One named synthetic ground-truth setting: joint mixture, X/Y split, the
// known optimum, and the filtered conditional target G at the optimum.
struct BenchmarkSetting {
    std::string name;
    GaussianMixture joint;
    SplitIndex split;
    Eigen::VectorXd x_star;
    double filter_threshold = 0.01;
    GaussianMixture target;   // G(Y) = filtered conditional at x_star
    GaussianMixture prior_x;  // marginal P(X)
};

// Loads "2D", "5D", "10D" or "toy" from <data_dir>/gmm_<name>.json.
BenchmarkSetting build_benchmark(const std::string& setting, const std::string& data_dir);

}  // namespace cdm
