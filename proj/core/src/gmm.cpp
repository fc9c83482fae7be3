#include "cdm/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace cdm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

Eigen::LLT<Eigen::MatrixXd> cholesky_or_throw(const Eigen::MatrixXd& cov, const char* what) {
    if (cov.rows() != cov.cols()) throw std::invalid_argument(std::string(what) + ": covariance not square");
    if (!cov.isApprox(cov.transpose(), 1e-10))
        throw std::invalid_argument(std::string(what) + ": covariance not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument(std::string(what) + ": covariance not positive definite");
    return llt;
}

double log_gaussian(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    auto llt = cholesky_or_throw(cov, "log_gaussian");
    const Eigen::MatrixXd L = llt.matrixL();
    Eigen::VectorXd z = L.triangularView<Eigen::Lower>().solve(x - mean);
    double log_det_half = 0.0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) log_det_half += std::log(L(i, i));
    return -0.5 * z.squaredNorm() - log_det_half - 0.5 * static_cast<double>(x.size()) * kLog2Pi;
}

}  // namespace

void GaussianMixture::validate() const {
    if (weights.empty() || weights.size() != means.size() || weights.size() != covariances.size())
        throw std::invalid_argument("GaussianMixture: inconsistent component counts");
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("GaussianMixture: negative weight");
        total += w;
    }
    if (std::fabs(total - 1.0) > 1e-12)
        throw std::invalid_argument("GaussianMixture: weights sum to " + std::to_string(total));
    const int64_t d = dim();
    for (size_t k = 0; k < components(); ++k) {
        if (means[k].size() != d) throw std::invalid_argument("GaussianMixture: mean dimension mismatch");
        if (covariances[k].rows() != d || covariances[k].cols() != d)
            throw std::invalid_argument("GaussianMixture: covariance dimension mismatch");
        cholesky_or_throw(covariances[k], "GaussianMixture");
    }
}

double GaussianMixture::log_pdf_component(size_t k, const Eigen::VectorXd& point) const {
    return log_gaussian(point, means[k], covariances[k]);
}

double GaussianMixture::pdf(const Eigen::VectorXd& point) const {
    double p = 0.0;
    for (size_t k = 0; k < components(); ++k) {
        if (weights[k] == 0.0) continue;
        p += weights[k] * std::exp(log_pdf_component(k, point));
    }
    return p;
}

Eigen::VectorXd GaussianMixture::sample_one(Rng& rng) const {
    const size_t k = rng.categorical(weights);
    auto llt = cholesky_or_throw(covariances[k], "sample");
    const Eigen::MatrixXd L = llt.matrixL();
    Eigen::VectorXd z(dim());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    return means[k] + L * z;
}

Tensor GaussianMixture::sample(int64_t n, Rng& rng) const {
    if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
    validate();
    const int64_t d = dim();
    // factor once per component
    std::vector<Eigen::MatrixXd> factors;
    factors.reserve(components());
    for (const auto& cov : covariances)
        factors.push_back(Eigen::MatrixXd(cholesky_or_throw(cov, "sample").matrixL()));
    Tensor out = Tensor::zeros({n, d});
    Eigen::VectorXd z(d);
    for (int64_t i = 0; i < n; ++i) {
        const size_t k = rng.categorical(weights);
        for (Eigen::Index j = 0; j < d; ++j) z[j] = rng.normal();
        Eigen::VectorXd x = means[k] + factors[k] * z;
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = x[j];
    }
    return out;
}

Eigen::VectorXd GaussianMixture::mean() const {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(dim());
    for (size_t k = 0; k < components(); ++k) m += weights[k] * means[k];
    return m;
}

GaussianMixture GaussianMixture::single(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
    GaussianMixture g;
    g.weights = {1.0};
    g.means = {std::move(mean)};
    g.covariances = {std::move(cov)};
    return g;
}

void SplitIndex::validate(int64_t total_dim) const {
    std::vector<bool> seen(static_cast<size_t>(total_dim), false);
    auto mark = [&](const std::vector<int64_t>& dims) {
        for (int64_t d : dims) {
            if (d < 0 || d >= total_dim) throw std::invalid_argument("SplitIndex: dimension out of range");
            if (seen[static_cast<size_t>(d)]) throw std::invalid_argument("SplitIndex: dimension listed twice");
            seen[static_cast<size_t>(d)] = true;
        }
    };
    mark(x_dims);
    mark(y_dims);
    for (bool s : seen)
        if (!s) throw std::invalid_argument("SplitIndex: union does not cover all dimensions");
}

GaussianMixture marginalize(const GaussianMixture& joint, const std::vector<int64_t>& dims) {
    GaussianMixture out;
    out.weights = joint.weights;
    const auto nd = static_cast<Eigen::Index>(dims.size());
    for (size_t k = 0; k < joint.components(); ++k) {
        Eigen::VectorXd m(nd);
        Eigen::MatrixXd c(nd, nd);
        for (Eigen::Index i = 0; i < nd; ++i) {
            m[i] = joint.means[k][dims[static_cast<size_t>(i)]];
            for (Eigen::Index j = 0; j < nd; ++j)
                c(i, j) = joint.covariances[k](dims[static_cast<size_t>(i)], dims[static_cast<size_t>(j)]);
        }
        out.means.push_back(std::move(m));
        out.covariances.push_back(std::move(c));
    }
    return out;
}

GaussianMixture condition(const GaussianMixture& joint, const SplitIndex& split, const Eigen::VectorXd& x,
                          double weight_floor) {
    split.validate(joint.dim());
    if (x.size() != static_cast<Eigen::Index>(split.x_dims.size()))
        throw std::invalid_argument("condition: x dimension does not match x_dims");
    if (weight_floor < 0.0 || weight_floor >= 1.0)
        throw std::invalid_argument("condition: weight_floor must lie in [0,1)");

    const auto nx = static_cast<Eigen::Index>(split.x_dims.size());
    const auto ny = static_cast<Eigen::Index>(split.y_dims.size());

    std::vector<double> logw(joint.components());
    GaussianMixture cond;
    for (size_t k = 0; k < joint.components(); ++k) {
        Eigen::VectorXd mx(nx), my(ny);
        Eigen::MatrixXd sxx(nx, nx), syy(ny, ny), syx(ny, nx);
        for (Eigen::Index i = 0; i < nx; ++i) {
            mx[i] = joint.means[k][split.x_dims[static_cast<size_t>(i)]];
            for (Eigen::Index j = 0; j < nx; ++j)
                sxx(i, j) = joint.covariances[k](split.x_dims[static_cast<size_t>(i)],
                                                 split.x_dims[static_cast<size_t>(j)]);
        }
        for (Eigen::Index i = 0; i < ny; ++i) {
            my[i] = joint.means[k][split.y_dims[static_cast<size_t>(i)]];
            for (Eigen::Index j = 0; j < ny; ++j)
                syy(i, j) = joint.covariances[k](split.y_dims[static_cast<size_t>(i)],
                                                 split.y_dims[static_cast<size_t>(j)]);
            for (Eigen::Index j = 0; j < nx; ++j)
                syx(i, j) = joint.covariances[k](split.y_dims[static_cast<size_t>(i)],
                                                 split.x_dims[static_cast<size_t>(j)]);
        }
        Eigen::LLT<Eigen::MatrixXd> llt(sxx);
        if (llt.info() != Eigen::Success) throw std::invalid_argument("condition: singular X-block covariance");
        logw[k] = std::log(std::max(joint.weights[k], 1e-300)) + log_gaussian(x, mx, sxx);
        // Schur complement
        Eigen::MatrixXd gain = llt.solve(syx.transpose()).transpose();  // Syx Sxx^-1
        cond.means.push_back(my + gain * (x - mx));
        Eigen::MatrixXd cc = syy - gain * syx.transpose();
        cond.covariances.push_back(0.5 * (cc + cc.transpose()));  // symmetrize round-off
    }

    const double lw_max = *std::max_element(logw.begin(), logw.end());
    if (!std::isfinite(lw_max)) throw std::runtime_error("condition: all components vanish at x");
    double total = 0.0;
    cond.weights.resize(joint.components());
    for (size_t k = 0; k < joint.components(); ++k) {
        cond.weights[k] = std::exp(logw[k] - lw_max);
        total += cond.weights[k];
    }
    for (auto& w : cond.weights) w /= total;

    // drop below-floor components, renormalize the rest
    GaussianMixture filtered;
    double kept = 0.0;
    for (size_t k = 0; k < cond.weights.size(); ++k) {
        if (cond.weights[k] < weight_floor) continue;
        filtered.weights.push_back(cond.weights[k]);
        filtered.means.push_back(cond.means[k]);
        filtered.covariances.push_back(cond.covariances[k]);
        kept += cond.weights[k];
    }
    if (filtered.weights.empty()) throw std::runtime_error("condition: weight_floor removed every component");
    for (auto& w : filtered.weights) w /= kept;
    return filtered;
}

double l2_gmm_distance(const GaussianMixture& p, const GaussianMixture& q) {
    if (p.dim() != q.dim()) throw std::invalid_argument("l2_gmm_distance: dimension mismatch");
    auto inner = [](const GaussianMixture& a, const GaussianMixture& b) {
        double s = 0.0;
        for (size_t i = 0; i < a.components(); ++i)
            for (size_t j = 0; j < b.components(); ++j) {
                const double lg =
                    log_gaussian(a.means[i], b.means[j], a.covariances[i] + b.covariances[j]);
                s += a.weights[i] * b.weights[j] * std::exp(lg);
            }
        return s;
    };
    const double d2 = inner(p, p) - 2.0 * inner(p, q) + inner(q, q);
    return std::sqrt(std::max(d2, 0.0));  // clamp 1e-16-scale cancellation
}

std::vector<double> tilted_density(const TiltedPosterior& tp, const std::vector<double>& grid) {
    if (grid.size() < 100) throw std::invalid_argument("tilted_density: grid too coarse (need >= 100 points)");
    if (tp.beta < 0.0) throw std::invalid_argument("tilted_density: beta must be nonnegative");
    if (tp.prior.dim() != 1) throw std::invalid_argument("tilted_density: 1-D prior required");
    std::vector<double> vals(grid.size());
    Eigen::VectorXd x(1);
    for (size_t i = 0; i < grid.size(); ++i) {
        x[0] = grid[i];
        const double lw = tp.beta > 0.0 ? -tp.beta * tp.loss(grid[i]) : 0.0;
        vals[i] = tp.prior.pdf(x) * std::exp(lw);
    }
    double z = 0.0;
    for (size_t i = 0; i + 1 < grid.size(); ++i)
        z += 0.5 * (vals[i] + vals[i + 1]) * (grid[i + 1] - grid[i]);
    if (!(z > 0.0)) throw std::runtime_error("tilted_density: normalizer vanished on grid");
    for (auto& v : vals) v /= z;
    return vals;
}

std::vector<double> tilted_reference_grid(double x_star) {
    std::vector<double> grid(2001);
    for (size_t i = 0; i < grid.size(); ++i)
        grid[i] = x_star - 10.0 + 20.0 * static_cast<double>(i) / 2000.0;
    return grid;
}

BenchmarkSetting build_benchmark(const std::string& setting, const std::string& data_dir) {
    static const std::vector<std::string> known{"2D", "5D", "10D", "toy"};
    if (std::find(known.begin(), known.end(), setting) == known.end())
        throw std::invalid_argument("build_benchmark: unknown setting '" + setting + "'");
    std::string fname = data_dir + "/gmm_" + (setting == "toy" ? "toy" : setting) + ".json";
    std::ifstream in(fname);
    if (!in) throw std::runtime_error("build_benchmark: cannot open " + fname);
    nlohmann::json j;
    in >> j;

    BenchmarkSetting bs;
    bs.name = setting;
    bs.filter_threshold = j.at("filter_threshold").get<double>();
    for (const auto& w : j.at("weights")) bs.joint.weights.push_back(w.get<double>());
    for (const auto& m : j.at("means")) {
        Eigen::VectorXd v(m.size());
        for (size_t i = 0; i < m.size(); ++i) v[static_cast<Eigen::Index>(i)] = m[i].get<double>();
        bs.joint.means.push_back(std::move(v));
    }
    for (const auto& c : j.at("covariances")) {
        const auto d = c.size();
        Eigen::MatrixXd cov(d, d);
        for (size_t r = 0; r < d; ++r)
            for (size_t cc = 0; cc < d; ++cc)
                cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cc)) = c[r][cc].get<double>();
        bs.joint.covariances.push_back(std::move(cov));
    }
    for (const auto& d : j.at("split").at("x_dims")) bs.split.x_dims.push_back(d.get<int64_t>());
    for (const auto& d : j.at("split").at("y_dims")) bs.split.y_dims.push_back(d.get<int64_t>());
    const auto& xs = j.at("x_star");
    bs.x_star.resize(static_cast<Eigen::Index>(xs.size()));
    for (size_t i = 0; i < xs.size(); ++i) bs.x_star[static_cast<Eigen::Index>(i)] = xs[i].get<double>();

    bs.joint.validate();
    bs.split.validate(bs.joint.dim());
    bs.target = condition(bs.joint, bs.split, bs.x_star, bs.filter_threshold);
    bs.prior_x = marginalize(bs.joint, bs.split.x_dims);
    return bs;
}

}  // namespace cdm
