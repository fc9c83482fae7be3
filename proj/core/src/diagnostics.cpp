#include "cdm/diagnostics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cdm {

namespace {

double percentile(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double idx = p * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(idx));
    const size_t hi = static_cast<size_t>(std::ceil(idx));
    const double frac = idx - std::floor(idx);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace

FidelityAggregates recompute_aggregates(const std::vector<FidelityRecord>& records, bool skip_outliers) {
    FidelityAggregates a;
    double out_gap = 0.0, jac_gap = 0.0, out_norm = 0.0, jac_norm_sq = 0.0;
    int64_t n = 0;
    for (const auto& r : records) {
        if (skip_outliers && r.outlier) continue;
        out_gap += r.out_gap_sq;
        jac_gap += r.jac_gap_sq;
        out_norm += r.out_norm_sq;
        jac_norm_sq += r.jac_norm_mean * r.jac_norm_mean;
        ++n;
    }
    if (n == 0) return a;
    const double dn = static_cast<double>(n);
    a.eps_dist = std::sqrt(out_gap / dn);
    a.eps_g_dist = std::sqrt(jac_gap / dn);
    a.y_bar = std::sqrt(out_norm / dn);
    a.j_bar = std::sqrt(jac_norm_sq / dn);
    a.r_s = a.y_bar > 0.0 ? a.eps_dist / a.y_bar : 0.0;
    a.r_g = a.j_bar > 0.0 ? a.eps_g_dist / a.j_bar : 0.0;
    if (a.r_s > 0.0) {
        a.ratio = a.r_g / a.r_s;
    } else {
        a.ratio = 0.0;
        a.ratio_undefined = true;
    }
    return a;
}

FidelityReport measure_eps(const ConditionalSampler& student, const ConditionalSampler& teacher,
                           const std::vector<Tensor>& inputs, int64_t n_directions, Rng& rng) {
    if (inputs.empty()) throw std::invalid_argument("measure_eps: no inputs");
    if (n_directions < 1) throw std::invalid_argument("measure_eps: need at least one direction");
    if (student.y_dim() != teacher.y_dim() || student.x_dim() != teacher.x_dim())
        throw std::invalid_argument("measure_eps: student/teacher dimension mismatch");
    const int64_t dy = student.y_dim();

    // directions shared across models and inputs within one report
    Tensor dirs = random_unit_directions(n_directions, dy, rng.fork("directions"));

    FidelityReport report;
    report.n_directions = n_directions;

    for (size_t i = 0; i < inputs.size(); ++i) {
        Rng eta_rng = rng.fork("eta").fork(i);
        FidelityRecord rec;

        // one tape per model, shared eta via identical rng state; VJPs reuse
        // the tape with retained backward
        struct Eval {
            Tensor out;
            std::vector<Tensor> vjps;
        };
        auto eval_model = [&](const ConditionalSampler& m) {
            Eval e;
            Tape tape;
            Var x = tape.leaf(inputs[i], true);
            Rng noise = eta_rng;  // copy: both models see the same stream
            Var y = m.sample(tape, x, 1, noise);
            e.out = y.value();
            for (int64_t d = 0; d < n_directions; ++d) {
                std::vector<double> v(static_cast<size_t>(dy));
                for (int64_t c = 0; c < dy; ++c) v[static_cast<size_t>(c)] = dirs.at(d, c);
                Var seed = tape.sum(tape.mul(y, tape.constant(Tensor::row(v))));
                tape.backward(seed, true);
                e.vjps.push_back(tape.grad(x));
            }
            return e;
        };
        Eval s = eval_model(student);
        Eval t = eval_model(teacher);

        for (int64_t c = 0; c < dy; ++c) {
            const double diff = s.out.data()[static_cast<size_t>(c)] - t.out.data()[static_cast<size_t>(c)];
            rec.out_gap_sq += diff * diff;
            rec.out_norm_sq += s.out.data()[static_cast<size_t>(c)] * s.out.data()[static_cast<size_t>(c)];
        }
        double jac_norm_acc = 0.0;
        for (int64_t d = 0; d < n_directions; ++d) {
            double gap = 0.0, norm = 0.0;
            for (int64_t c = 0; c < s.vjps[static_cast<size_t>(d)].size(); ++c) {
                const double js = s.vjps[static_cast<size_t>(d)].data()[static_cast<size_t>(c)];
                const double jt = t.vjps[static_cast<size_t>(d)].data()[static_cast<size_t>(c)];
                gap += (js - jt) * (js - jt);
                norm += js * js;
            }
            rec.jac_gap_sq += gap;
            jac_norm_acc += std::sqrt(norm);
        }
        rec.jac_gap_sq /= static_cast<double>(n_directions);
        rec.jac_norm_mean = jac_norm_acc / static_cast<double>(n_directions);

        const double y_norm = std::sqrt(rec.out_norm_sq);
        rec.r_s = y_norm > 0.0 ? std::sqrt(rec.out_gap_sq) / y_norm : 0.0;
        rec.r_g = rec.jac_norm_mean > 0.0 ? std::sqrt(rec.jac_gap_sq) / rec.jac_norm_mean : 0.0;
        if (rec.r_s > 0.0) {
            rec.ratio = rec.r_g / rec.r_s;
        } else {
            rec.ratio = 0.0;
            rec.ratio_undefined = true;
        }
        report.records.push_back(rec);
    }

    // Tukey fence on the per-input ratio
    std::vector<double> ratios;
    for (const auto& r : report.records)
        if (!r.ratio_undefined) ratios.push_back(r.ratio);
    if (ratios.size() >= 4) {
        const double q1 = percentile(ratios, 0.25);
        const double q3 = percentile(ratios, 0.75);
        const double iqr = q3 - q1;
        const double lo = q1 - 1.5 * iqr, hi = q3 + 1.5 * iqr;
        for (auto& r : report.records)
            r.outlier = !r.ratio_undefined && (r.ratio < lo || r.ratio > hi);
    }
    for (const auto& r : report.records) report.outlier_count += r.outlier ? 1 : 0;

    report.all = recompute_aggregates(report.records, false);
    report.inliers = recompute_aggregates(report.records, true);

    // bootstrap CIs over inputs (all records)
    Rng boot = rng.fork("bootstrap");
    std::vector<double> bs_rs, bs_rg, bs_ratio;
    const size_t N = report.records.size();
    for (int64_t b = 0; b < 1000; ++b) {
        std::vector<FidelityRecord> resample;
        resample.reserve(N);
        for (size_t k = 0; k < N; ++k)
            resample.push_back(report.records[static_cast<size_t>(boot.uniform_int(static_cast<int64_t>(N)))]);
        FidelityAggregates a = recompute_aggregates(resample, false);
        bs_rs.push_back(a.r_s);
        bs_rg.push_back(a.r_g);
        if (!a.ratio_undefined) bs_ratio.push_back(a.ratio);
    }
    report.r_s_ci = {percentile(bs_rs, 0.025), percentile(bs_rs, 0.975)};
    report.r_g_ci = {percentile(bs_rg, 0.025), percentile(bs_rg, 0.975)};
    if (!bs_ratio.empty()) report.ratio_ci = {percentile(bs_ratio, 0.025), percentile(bs_ratio, 0.975)};
    return report;
}

std::vector<double> multi_rbf_gammas(double bandwidth) {
    std::vector<double> g;
    for (int l = 1; l <= 5; ++l) g.push_back(1.0 / (bandwidth * std::pow(2.0, l - 3)));
    return g;
}

double population_mmd2(const GaussianMixture& p, const GaussianMixture& q, const std::vector<double>& gammas) {
    if (p.dim() != q.dim()) throw std::invalid_argument("population_mmd2: dimension mismatch");
    const auto d = static_cast<Eigen::Index>(p.dim());
    auto expected_kernel = [&](const GaussianMixture& a, const GaussianMixture& b) {
        double total = 0.0;
        for (size_t i = 0; i < a.components(); ++i)
            for (size_t j = 0; j < b.components(); ++j) {
                const Eigen::VectorXd m = a.means[i] - b.means[j];
                const Eigen::MatrixXd S = a.covariances[i] + b.covariances[j];
                double acc = 0.0;
                for (double gamma : gammas) {
                    const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(d, d) + 2.0 * gamma * S;
                    const Eigen::LLT<Eigen::MatrixXd> llt(A);
                    const Eigen::MatrixXd L = llt.matrixL();
                    double log_det = 0.0;
                    for (Eigen::Index k = 0; k < d; ++k) log_det += std::log(L(k, k));
                    const Eigen::VectorXd z = llt.solve(m);
                    acc += std::exp(-gamma * m.dot(z) - log_det);
                }
                total += a.weights[i] * b.weights[j] * acc;
            }
        return total;
    };
    return expected_kernel(p, p) - 2.0 * expected_kernel(p, q) + expected_kernel(q, q);
}

ConcentrationResult concentration_experiment(const GaussianMixture& cond, const GaussianMixture& target,
                                             const KernelSpec& kernel, const std::vector<int64_t>& n_grid,
                                             int64_t repeats, double sampler_shift, Rng& rng) {
    if (n_grid.size() < 3) throw std::invalid_argument("concentration_experiment: need >= 3 grid points");
    if (kernel.bandwidth != KernelSpec::Bandwidth::fixed)
        throw std::invalid_argument("concentration_experiment: fixed-bandwidth kernel required");

    GaussianMixture cond_shifted = cond;
    if (sampler_shift != 0.0)
        for (auto& m : cond_shifted.means) m.array() += sampler_shift;

    const double pop = population_mmd2(cond, target, kernel.kind == KernelSpec::Kind::multi_rbf
                                                         ? multi_rbf_gammas(kernel.sigma)
                                                         : std::vector<double>{1.0 / kernel.sigma});
    ConcentrationResult res;
    res.n_grid = n_grid;
    for (size_t gi = 0; gi < n_grid.size(); ++gi) {
        const int64_t n = n_grid[gi];
        Rng grid_rng = rng.fork("n").fork(gi);
        double sq_sum = 0.0;
        for (int64_t r = 0; r < repeats; ++r) {
            Tensor sc = cond_shifted.sample(n, grid_rng);
            Tensor st = target.sample(n, grid_rng);
            const double v = mmd_v_value(sc, st, kernel);
            sq_sum += (v - pop) * (v - pop);
        }
        res.rms_error.push_back(std::sqrt(sq_sum / static_cast<double>(repeats)));
    }
    std::vector<double> xs, ys;
    for (size_t i = 0; i < n_grid.size(); ++i) {
        xs.push_back(static_cast<double>(n_grid[i]));
        ys.push_back(res.rms_error[i]);
    }
    res.slope = fit_loglog_slope(xs, ys);
    res.floor_estimate = res.rms_error.back();
    return res;
}

GradientBiasVariance gradient_bias_variance(const ConditionalSampler& sampler, const GaussianMixture& cond_law,
                                            const GaussianMixture& target, const Tensor& x_row,
                                            const KernelSpec& fixed_kernel, int64_t n_target,
                                            const std::vector<int64_t>& n_grid, int64_t repeats, Rng& rng) {
    if (fixed_kernel.bandwidth != KernelSpec::Bandwidth::fixed)
        throw std::invalid_argument("gradient_bias_variance: fixed-bandwidth kernel required");
    const int64_t dx = x_row.size();
    const auto gammas = fixed_kernel.kind == KernelSpec::Kind::multi_rbf
                            ? multi_rbf_gammas(fixed_kernel.sigma)
                            : std::vector<double>{1.0 / fixed_kernel.sigma};

    // reference: central differences of the closed-form population MMD^2
    // in the conditioning input (the conditional law comes from cond_law)
    GradientBiasVariance out;
    out.reference_grad = Tensor::zeros(x_row.shape());
    // cond_law is the joint; by convention its first dx dims are X, the rest Y
    SplitIndex split;
    for (int64_t i = 0; i < dx; ++i) split.x_dims.push_back(i);
    for (int64_t i = dx; i < cond_law.dim(); ++i) split.y_dims.push_back(i);
    auto pop_loss = [&](const Tensor& xr) {
        Eigen::VectorXd xv(dx);
        for (int64_t i = 0; i < dx; ++i) xv[i] = xr.data()[static_cast<size_t>(i)];
        GaussianMixture c = condition(cond_law, split, xv, 0.0);
        return population_mmd2(c, target, gammas);
    };
    const double h = 1e-5;
    for (int64_t i = 0; i < dx; ++i) {
        Tensor xp(x_row.shape(), x_row.data()), xm(x_row.shape(), x_row.data());
        xp.data()[static_cast<size_t>(i)] += h;
        xm.data()[static_cast<size_t>(i)] -= h;
        out.reference_grad.data()[static_cast<size_t>(i)] = (pop_loss(xp) - pop_loss(xm)) / (2.0 * h);
    }

    // bias at the largest n in the grid
    const int64_t n_bias = n_grid.back();
    std::vector<Tensor> grads;
    grads.reserve(static_cast<size_t>(repeats));
    Rng bias_rng = rng.fork("bias");
    for (int64_t r = 0; r < repeats; ++r) {
        Tape tape;
        Var x = tape.leaf(x_row, true);
        Var cond = sampler.sample(tape, x, n_bias, bias_rng);
        Tensor tgt = target.sample(n_target, bias_rng);
        Var loss = mmd_u_squared(tape, cond, tgt, fixed_kernel);
        tape.backward(loss);
        grads.push_back(tape.grad(x));
    }
    out.mean_grad = Tensor::zeros(x_row.shape());
    for (const auto& g : grads)
        for (int64_t i = 0; i < dx; ++i) out.mean_grad.data()[static_cast<size_t>(i)] += g.data()[static_cast<size_t>(i)];
    for (auto& v : out.mean_grad.data()) v /= static_cast<double>(repeats);
    out.bias = Tensor::zeros(x_row.shape());
    out.bias_se = Tensor::zeros(x_row.shape());
    for (int64_t i = 0; i < dx; ++i) {
        out.bias.data()[static_cast<size_t>(i)] =
            out.mean_grad.data()[static_cast<size_t>(i)] - out.reference_grad.data()[static_cast<size_t>(i)];
        double var = 0.0;
        for (const auto& g : grads) {
            const double d = g.data()[static_cast<size_t>(i)] - out.mean_grad.data()[static_cast<size_t>(i)];
            var += d * d;
        }
        var /= static_cast<double>(repeats - 1);
        out.bias_se.data()[static_cast<size_t>(i)] = std::sqrt(var / static_cast<double>(repeats));
    }

    // bootstrap CI on ||bias||
    Rng boot = rng.fork("bootstrap");
    std::vector<double> norms;
    for (int64_t b = 0; b < 1000; ++b) {
        Tensor mean = Tensor::zeros(x_row.shape());
        for (int64_t r = 0; r < repeats; ++r) {
            const auto& g = grads[static_cast<size_t>(boot.uniform_int(repeats))];
            for (int64_t i = 0; i < dx; ++i) mean.data()[static_cast<size_t>(i)] += g.data()[static_cast<size_t>(i)];
        }
        double norm = 0.0;
        for (int64_t i = 0; i < dx; ++i) {
            const double v =
                mean.data()[static_cast<size_t>(i)] / static_cast<double>(repeats) -
                out.reference_grad.data()[static_cast<size_t>(i)];
            norm += v * v;
        }
        norms.push_back(std::sqrt(norm));
    }
    out.bias_norm_ci = {percentile(norms, 0.025), percentile(norms, 0.975)};

    // variance vs n_cond
    out.n_grid = n_grid;
    Rng var_rng = rng.fork("variance");
    for (size_t gi = 0; gi < n_grid.size(); ++gi) {
        const int64_t n = n_grid[gi];
        std::vector<Tensor> gs;
        for (int64_t r = 0; r < repeats; ++r) {
            Tape tape;
            Var x = tape.leaf(x_row, true);
            Var cond = sampler.sample(tape, x, n, var_rng);
            Tensor tgt = target.sample(n_target, var_rng);
            Var loss = mmd_u_squared(tape, cond, tgt, fixed_kernel);
            tape.backward(loss);
            gs.push_back(tape.grad(x));
        }
        double var = 0.0;
        for (int64_t i = 0; i < dx; ++i) {
            double mean = 0.0;
            for (const auto& g : gs) mean += g.data()[static_cast<size_t>(i)];
            mean /= static_cast<double>(repeats);
            double vi = 0.0;
            for (const auto& g : gs) {
                const double d = g.data()[static_cast<size_t>(i)] - mean;
                vi += d * d;
            }
            var += vi / static_cast<double>(repeats - 1);
        }
        out.variance_per_n.push_back(var / static_cast<double>(dx));
    }
    std::vector<double> xs;
    for (int64_t n : n_grid) xs.push_back(static_cast<double>(n));
    out.variance_slope = fit_loglog_slope(xs, out.variance_per_n);
    return out;
}

MemoryRatioResult memory_ratio_experiment(const std::function<Var(Tape&, Var, int64_t, Rng&)>& teacher_at_k,
                                          const std::vector<int64_t>& k_list,
                                          const ConditionalSampler& student, const Tensor& x_row,
                                          int64_t n_cond, Rng& rng) {
    MemoryRatioResult out;
    auto run_samples = [&](const std::function<Var(Tape&, Var, Rng&)>& one_sample) {
        MemoryRatioRow row;
        row.n_cond = n_cond;
        for (int64_t s = 0; s < n_cond; ++s) {
            Tape tape;
            Var x = tape.leaf(x_row, true);
            Rng sample_rng = rng.fork("sample").fork(s);
            Var y = one_sample(tape, x, sample_rng);
            Var seed = tape.sum(y);
            tape.backward(seed);
            auto [depth, nodes] = tape.depth_and_node_count();
            row.tape_nodes += nodes;
            row.tape_depth = std::max(row.tape_depth, depth);
            row.stored_scalars += tape.stored_value_scalars();
        }
        row.nodes_per_sample = static_cast<double>(row.tape_nodes) / static_cast<double>(n_cond);
        return row;
    };

    out.student_row = run_samples(
        [&](Tape& tape, Var x, Rng& r) { return student.sample(tape, x, 1, r); });
    out.student_row.k_steps = 1;

    std::vector<double> xs, ys;
    for (int64_t k : k_list) {
        MemoryRatioRow row = run_samples(
            [&](Tape& tape, Var x, Rng& r) { return teacher_at_k(tape, x, k, r); });
        row.k_steps = k;
        out.teacher_rows.push_back(row);
        out.ratio_per_k.push_back(row.nodes_per_sample / out.student_row.nodes_per_sample);
        xs.push_back(static_cast<double>(k * n_cond));
        ys.push_back(static_cast<double>(row.tape_nodes));
    }
    out.linear_fit_r2 = fit_linear_r2(xs, ys);
    return out;
}

double w1_sorted_samples(std::vector<double> a, std::vector<double> b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("w1_sorted_samples: equal nonempty sizes required");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

double w1_sample_vs_density(const std::vector<double>& samples, const std::vector<double>& grid,
                            const std::vector<double>& density) {
    if (grid.size() != density.size() || grid.size() < 2)
        throw std::invalid_argument("w1_sample_vs_density: bad grid");
    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    double w1 = 0.0, f_q = 0.0;
    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        const double dx = grid[i + 1] - grid[i];
        const auto count = std::upper_bound(sorted.begin(), sorted.end(), grid[i]) - sorted.begin();
        const double f_e = static_cast<double>(count) / static_cast<double>(sorted.size());
        w1 += std::fabs(f_e - std::min(f_q, 1.0)) * dx;
        f_q += 0.5 * (density[i] + density[i + 1]) * dx;
    }
    return w1;
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_loglog_slope: bad data");
    std::vector<double> lx, ly;
    for (size_t i = 0; i < x.size(); ++i) {
        lx.push_back(std::log(x[i]));
        ly.push_back(std::log(std::max(y[i], 1e-300)));
    }
    const double n = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < lx.size(); ++i) {
        sx += lx[i];
        sy += ly[i];
        sxx += lx[i] * lx[i];
        sxy += lx[i] * ly[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

double fit_linear_r2(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_linear_r2: bad data");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
        syy += y[i] * y[i];
    }
    const double cov = n * sxy - sx * sy;
    const double vx = n * sxx - sx * sx;
    const double vy = n * syy - sy * sy;
    if (vx <= 0.0 || vy <= 0.0) return 1.0;  // degenerate: perfectly flat
    return (cov * cov) / (vx * vy);
}

}  // namespace cdm
