#include "cdm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdm {

namespace {

void check_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw std::invalid_argument(std::string(what) + ": rank-2 sample matrix required");
    if (t.shape()[0] < 1) throw std::invalid_argument(std::string(what) + ": empty sample");
}

// gamma_l such that k(a,b) = sum_l exp(-||a-b||^2 * gamma_l)
std::vector<double> kernel_gammas(const KernelSpec& k, double bandwidth) {
    if (k.kind == KernelSpec::Kind::multi_rbf) {
        std::vector<double> g;
        for (int l = 1; l <= 5; ++l) g.push_back(1.0 / (bandwidth * std::pow(2.0, l - 3)));
        return g;
    }
    // generalized rbf with alpha == 1 collapses to a single bandwidth;
    // alpha != 1 is handled separately in kernel_matrix
    return {1.0 / bandwidth};
}

double kernel_at_zero(const KernelSpec& k) {
    return k.kind == KernelSpec::Kind::multi_rbf ? 5.0 : 1.0;
}

// Pairwise squared distances D(i,j) = ||a_i - b_j||^2 as a tape value.
// a is on-tape; b enters as a constant. Uses rn + rm^T - 2 a b^T.
Var pairwise_sq_dists(Tape& tape, Var a, Var b) {
    const int64_t n = a.value().shape()[0];
    const int64_t m = b.value().shape()[0];
    const int64_t d = a.value().shape()[1];
    Var ones = tape.constant(Tensor::full({d, 1}, 1.0));
    Var ra = tape.matmul(tape.mul(a, a), ones);                          // n x 1
    Var rb = tape.matmul(tape.mul(b, b), ones);                          // m x 1
    Var cross = tape.matmul(a, tape.transpose(b));                       // n x m
    Var sums = tape.add(tape.broadcast(ra, {n, m}), tape.broadcast(tape.transpose(rb), {n, m}));
    Var dist = tape.sub(sums, tape.scale(cross, 2.0));
    return tape.clamp_min(dist, 0.0);  // guards the 1e-16-scale negatives on the diagonal
}

Var kernel_matrix(Tape& tape, Var dists, const KernelSpec& k, double bandwidth) {
    if (k.kind == KernelSpec::Kind::generalized_rbf && k.alpha != 1.0) {
        // exp(-(D/(2 sigma^2))^alpha); the clamp keeps log finite at D = 0,
        // where the kernel value saturates to 1
        Var scaled = tape.clamp_min(tape.scale(dists, 1.0 / bandwidth), 1e-300);
        Var powed = tape.exp(tape.scale(tape.log(scaled), k.alpha));
        return tape.exp(tape.neg(powed));
    }
    auto gammas = kernel_gammas(k, bandwidth);
    Var acc = tape.exp(tape.scale(dists, -gammas[0]));
    for (size_t l = 1; l < gammas.size(); ++l)
        acc = tape.add(acc, tape.exp(tape.scale(dists, -gammas[l])));
    return acc;
}

// order-insensitive under argument swap: (sum K + sum K^T) / 2
Var symmetric_sum(Tape& tape, Var k) {
    return tape.scale(tape.add(tape.sum(k), tape.sum(tape.transpose(k))), 0.5);
}

struct MmdTerms {
    Var s_cc;  // sum over cond-cond kernel
    Var s_ct;  // symmetrized sum over cross kernel
    Var s_tt;  // sum over target-target kernel (constant subgraph)
    int64_t n;
    int64_t m;
};

MmdTerms mmd_terms(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel, double bandwidth) {
    check_matrix(cond.value(), "mmd");
    check_matrix(target, "mmd");
    if (cond.value().shape()[1] != target.shape()[1])
        throw std::invalid_argument("mmd: dimension mismatch between " + cond.value().shape_str() + " and " +
                                    target.shape_str());
    Var tgt = tape.constant(target);
    MmdTerms t;
    t.n = cond.value().shape()[0];
    t.m = target.shape()[0];
    t.s_cc = tape.sum(kernel_matrix(tape, pairwise_sq_dists(tape, cond, cond), kernel, bandwidth));
    t.s_ct = symmetric_sum(tape, kernel_matrix(tape, pairwise_sq_dists(tape, cond, tgt), kernel, bandwidth));
    t.s_tt = tape.sum(kernel_matrix(tape, pairwise_sq_dists(tape, tgt, tgt), kernel, bandwidth));
    return t;
}

Var sorted_w1(Tape& tape, Var proj_cond, const std::vector<double>& proj_target) {
    auto [sorted_c, perm] = tape.sort_with_gradient(proj_cond);
    std::vector<double> st = proj_target;
    std::sort(st.begin(), st.end());
    Var target_sorted = tape.constant(Tensor(sorted_c.value().shape(), std::move(st)));
    return tape.mean(tape.abs(tape.sub(sorted_c, target_sorted)));
}

}  // namespace

void KernelSpec::validate() const {
    if (bandwidth == Bandwidth::fixed && !(sigma > 0.0))
        throw std::invalid_argument("KernelSpec: fixed sigma must be positive");
    if (!(alpha > 0.0)) throw std::invalid_argument("KernelSpec: alpha must be positive");
}

KernelSpec KernelSpec::multi_rbf_mean_sq() { return KernelSpec{}; }

KernelSpec KernelSpec::multi_rbf_fixed(double sigma) {
    KernelSpec k;
    k.bandwidth = Bandwidth::fixed;
    k.sigma = sigma;
    return k;
}

KernelSpec KernelSpec::generalized_rbf_median(double alpha) {
    KernelSpec k;
    k.kind = Kind::generalized_rbf;
    k.bandwidth = Bandwidth::median_heuristic;
    k.alpha = alpha;
    return k;
}

void LossSpec::validate() const {
    kernel.validate();
    if (kind == Kind::swd && n_projections < 1)
        throw std::invalid_argument("LossSpec: n_projections must be >= 1");
    if (kind == Kind::mmd_u_sqrt && !(epsilon > 0.0))
        throw std::invalid_argument("LossSpec: epsilon must be positive");
}

std::string LossSpec::kind_name() const {
    switch (kind) {
        case Kind::mmd_v: return "mmd_v";
        case Kind::mmd_u_sqrt: return "mmd_u_sqrt";
        case Kind::swd: return "swd";
    }
    return "?";
}

double resolve_bandwidth(const KernelSpec& k, const Tensor& cond, const Tensor& target) {
    k.validate();
    if (k.bandwidth == KernelSpec::Bandwidth::fixed) return k.sigma;
    const int64_t n = cond.shape()[0], m = target.shape()[0], d = cond.shape()[1];
    if (k.bandwidth == KernelSpec::Bandwidth::mean_sq_heuristic) {
        // mean pairwise squared distance of the merged sample via the moment
        // identity sum_{ij} ||z_i - z_j||^2 = 2 N sum ||z||^2 - 2 ||sum z||^2
        const int64_t N = n + m;
        if (N < 2) throw std::invalid_argument("resolve_bandwidth: need at least two merged points");
        double s2 = 0.0;
        std::vector<double> sv(static_cast<size_t>(d), 0.0);
        auto absorb = [&](const Tensor& t) {
            for (int64_t i = 0; i < t.shape()[0]; ++i)
                for (int64_t j = 0; j < d; ++j) {
                    const double v = t.at(i, j);
                    s2 += v * v;
                    sv[static_cast<size_t>(j)] += v;
                }
        };
        absorb(cond);
        absorb(target);
        double sv2 = 0.0;
        for (double v : sv) sv2 += v * v;
        const double pair_total = 2.0 * static_cast<double>(N) * s2 - 2.0 * sv2;
        const double mean_sq = std::max(pair_total / (static_cast<double>(N) * static_cast<double>(N - 1)), 1e-12);
        return mean_sq;
    }
    // median heuristic on the cross pairs; returns 2 sigma^2 directly
    std::vector<double> d2;
    d2.reserve(static_cast<size_t>(n * m));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < d; ++c) {
                const double diff = cond.at(i, c) - target.at(j, c);
                s += diff * diff;
            }
            d2.push_back(s);
        }
    const size_t mid = d2.size() / 2;
    std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
    return std::max(d2[mid], 1e-12);
}

Var mmd_v(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel) {
    const double bw = resolve_bandwidth(kernel, cond.value(), target);
    MmdTerms t = mmd_terms(tape, cond, target, kernel, bw);
    const double n = static_cast<double>(t.n), m = static_cast<double>(t.m);
    Var within = tape.add(tape.scale(t.s_cc, 1.0 / (n * n)), tape.scale(t.s_tt, 1.0 / (m * m)));
    return tape.add(within, tape.scale(t.s_ct, -2.0 / (n * m)));
}

Var mmd_u_sqrt(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel, double eps) {
    if (cond.value().shape()[0] < 2 || target.shape()[0] < 2)
        throw std::invalid_argument("mmd_u_sqrt: U-statistic needs at least 2 points per sample");
    if (!(eps > 0.0)) throw std::invalid_argument("mmd_u_sqrt: eps must be positive");
    const double bw = resolve_bandwidth(kernel, cond.value(), target);
    MmdTerms t = mmd_terms(tape, cond, target, kernel, bw);
    const double n = static_cast<double>(t.n), m = static_cast<double>(t.m);
    const double k0 = kernel_at_zero(kernel);
    Var cc = tape.scale(tape.add_scalar(t.s_cc, -n * k0), 1.0 / (n * (n - 1.0)));
    Var tt = tape.scale(tape.add_scalar(t.s_tt, -m * k0), 1.0 / (m * (m - 1.0)));
    Var u = tape.add(tape.add(cc, tt), tape.scale(t.s_ct, -2.0 / (n * m)));
    return tape.sqrt(tape.add_scalar(tape.abs(u), eps));
}

Var mmd_u_squared(Tape& tape, Var cond, const Tensor& target, const KernelSpec& kernel) {
    if (cond.value().shape()[0] < 2 || target.shape()[0] < 2)
        throw std::invalid_argument("mmd_u_squared: U-statistic needs at least 2 points per sample");
    const double bw = resolve_bandwidth(kernel, cond.value(), target);
    MmdTerms t = mmd_terms(tape, cond, target, kernel, bw);
    const double n = static_cast<double>(t.n), m = static_cast<double>(t.m);
    const double k0 = kernel_at_zero(kernel);
    Var cc = tape.scale(tape.add_scalar(t.s_cc, -n * k0), 1.0 / (n * (n - 1.0)));
    Var tt = tape.scale(tape.add_scalar(t.s_tt, -m * k0), 1.0 / (m * (m - 1.0)));
    return tape.add(tape.add(cc, tt), tape.scale(t.s_ct, -2.0 / (n * m)));
}

Var swd_with_directions(Tape& tape, Var cond, const Tensor& target, const Tensor& directions) {
    check_matrix(cond.value(), "swd");
    check_matrix(target, "swd");
    const int64_t n = cond.value().shape()[0];
    const int64_t m = target.shape()[0];
    const int64_t d = cond.value().shape()[1];
    if (n != m)
        throw std::invalid_argument("swd: equal sample sizes required, got " + std::to_string(n) + " and " +
                                    std::to_string(m));
    if (target.shape()[1] != d)
        throw std::invalid_argument("swd: dimension mismatch between " + cond.value().shape_str() + " and " +
                                    target.shape_str());
    if (d == 1) {
        std::vector<double> pt(static_cast<size_t>(m));
        for (int64_t j = 0; j < m; ++j) pt[static_cast<size_t>(j)] = target.at(j, 0);
        return sorted_w1(tape, cond, pt);
    }
    if (directions.rank() != 2 || directions.shape()[1] != d || directions.shape()[0] < 1)
        throw std::invalid_argument("swd: directions must be L x d with L >= 1");
    const int64_t L = directions.shape()[0];
    Var proj = tape.matmul(cond, tape.transpose(tape.constant(directions)));  // n x L
    std::vector<Var> per_dir;
    per_dir.reserve(static_cast<size_t>(L));
    for (int64_t l = 0; l < L; ++l) {
        Var col = tape.index_select(proj, 1, {l});
        std::vector<double> pt(static_cast<size_t>(m), 0.0);
        for (int64_t j = 0; j < m; ++j)
            for (int64_t c = 0; c < d; ++c) pt[static_cast<size_t>(j)] += target.at(j, c) * directions.at(l, c);
        per_dir.push_back(sorted_w1(tape, col, pt));
    }
    if (L == 1) return per_dir[0];
    return tape.mean(tape.concat(per_dir, 0));
}

Tensor random_unit_directions(int64_t count, int64_t dim, Rng& rng) {
    Tensor dirs = Tensor::zeros({count, dim});
    for (int64_t l = 0; l < count; ++l) {
        double norm2 = 0.0;
        do {
            norm2 = 0.0;
            for (int64_t c = 0; c < dim; ++c) {
                const double v = rng.normal();
                dirs.at(l, c) = v;
                norm2 += v * v;
            }
        } while (norm2 < 1e-24);
        const double inv = 1.0 / std::sqrt(norm2);
        for (int64_t c = 0; c < dim; ++c) dirs.at(l, c) *= inv;
    }
    return dirs;
}

Var swd(Tape& tape, Var cond, const Tensor& target, int64_t n_projections, Rng& rng) {
    if (n_projections < 1) throw std::invalid_argument("swd: n_projections must be >= 1");
    const int64_t d = cond.value().shape()[1];
    if (d == 1) return swd_with_directions(tape, cond, target, Tensor::zeros({1, 1}));
    return swd_with_directions(tape, cond, target, random_unit_directions(n_projections, d, rng));
}

Var loss_eval(Tape& tape, const LossSpec& spec, Var cond, const Tensor& target, Rng& rng) {
    spec.validate();
    switch (spec.kind) {
        case LossSpec::Kind::mmd_v: return mmd_v(tape, cond, target, spec.kernel);
        case LossSpec::Kind::mmd_u_sqrt: return mmd_u_sqrt(tape, cond, target, spec.kernel, spec.epsilon);
        case LossSpec::Kind::swd: return swd(tape, cond, target, spec.n_projections, rng);
    }
    throw std::logic_error("loss_eval: bad loss kind");
}

double mmd_v_value(const Tensor& a, const Tensor& b, const KernelSpec& kernel) {
    Tape tape;
    Var cond = tape.constant(a);
    return mmd_v(tape, cond, b, kernel).value().item();
}

double swd_value(const Tensor& a, const Tensor& b, int64_t n_projections, Rng& rng) {
    Tape tape;
    Var cond = tape.constant(a);
    return swd(tape, cond, b, n_projections, rng).value().item();
}

double loss_value(const LossSpec& spec, const Tensor& a, const Tensor& b, Rng& rng) {
    Tape tape;
    Var cond = tape.constant(a);
    return loss_eval(tape, spec, cond, b, rng).value().item();
}

}  // namespace cdm
