#include "cdm/consistency.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cdm/optim.hpp"

namespace cdm {

void IctConfig::validate() const {
    if (s0 < 1 || s1 < s0) throw std::invalid_argument("IctConfig: need 1 <= s0 <= s1");
    if (!(sigma_min > 0.0)) throw std::invalid_argument("IctConfig: sigma_min must be positive");
    if (sigma_max != 0.0 && sigma_max <= sigma_min)
        throw std::invalid_argument("IctConfig: sigma_max must exceed sigma_min");
    if (!(p_std > 0.0) || !(rho > 0.0)) throw std::invalid_argument("IctConfig: bad p_std or rho");
    if (sampling_levels.empty()) throw std::invalid_argument("IctConfig: empty sampling levels");
    for (size_t i = 0; i < sampling_levels.size(); ++i) {
        if (sampling_levels[i] < sigma_min)
            throw std::invalid_argument("IctConfig: sampling level below sigma_min");
        if (i > 0 && sampling_levels[i] >= sampling_levels[i - 1])
            throw std::invalid_argument("IctConfig: sampling levels must be strictly decreasing");
    }
}

double ConsistencyModel::c_skip(double sigma) const {
    const double sd2 = cfg.sigma_data * cfg.sigma_data;
    const double d = sigma - cfg.sigma_min;
    return sd2 / (d * d + sd2);
}

double ConsistencyModel::c_out(double sigma) const {
    const double sd = cfg.sigma_data;
    return sd * (sigma - cfg.sigma_min) / std::sqrt(sd * sd + sigma * sigma);
}

double ConsistencyModel::c_in(double sigma) const {
    return 1.0 / std::sqrt(cfg.sigma_data * cfg.sigma_data + sigma * sigma);
}

Var ConsistencyModel::apply(Tape& tape, Var y, double sigma, Var x, std::vector<Var>* param_vars) const {
    const int64_t n = y.value().shape()[0];
    Var y_in = tape.scale(y, c_in(sigma));
    Var f = net.forward(tape, y_in, net.time_embedding(std::log(sigma), n), x, param_vars);
    return tape.add(tape.scale(y, c_skip(sigma)), tape.scale(f, c_out(sigma)));
}

Var ConsistencyModel::apply_rows(Tape& tape, Var y, const std::vector<double>& sigma, Var x,
                                 std::vector<Var>* param_vars) const {
    const int64_t n = y.value().shape()[0];
    const int64_t d = y.value().shape()[1];
    if (static_cast<int64_t>(sigma.size()) != n)
        throw std::invalid_argument("apply_rows: one sigma per row required");
    std::vector<double> cin(sigma.size()), cskip(sigma.size()), cout(sigma.size()), logs(sigma.size());
    for (size_t i = 0; i < sigma.size(); ++i) {
        cin[i] = c_in(sigma[i]);
        cskip[i] = c_skip(sigma[i]);
        cout[i] = c_out(sigma[i]);
        logs[i] = std::log(sigma[i]);
    }
    auto col = [&](const std::vector<double>& v) {
        return tape.broadcast(tape.constant(Tensor::column(v)), {n, d});
    };
    Var y_in = tape.mul(y, col(cin));
    Var f = net.forward(tape, y_in, net.time_embedding(logs), x, param_vars);
    return tape.add(tape.mul(y, col(cskip)), tape.mul(f, col(cout)));
}

std::vector<double> ConsistencyModel::single_step_levels() const {
    return {cfg.sampling_levels.front()};
}

Var ConsistencyModel::sample(Tape& tape, Var x, int64_t n, const std::vector<double>& levels,
                             Rng& rng) const {
    if (levels.empty()) throw std::invalid_argument("ConsistencyModel::sample: no levels");
    for (size_t i = 0; i < levels.size(); ++i) {
        if (levels[i] < cfg.sigma_min)
            throw std::invalid_argument("ConsistencyModel::sample: level below sigma_min");
        if (i > 0 && levels[i] >= levels[i - 1])
            throw std::invalid_argument("ConsistencyModel::sample: levels must decrease");
    }
    const int64_t dy = net.cfg.in_dim;
    Tensor y0 = Tensor::zeros({n, dy});
    for (auto& v : y0.data()) v = levels[0] * rng.normal();
    Var y = tape.constant(y0);
    Var f = apply(tape, y, levels[0], x);
    for (size_t l = 1; l < levels.size(); ++l) {
        const double s = std::sqrt(levels[l] * levels[l] - cfg.sigma_min * cfg.sigma_min);
        Tensor z = Tensor::zeros({n, dy});
        for (auto& v : z.data()) v = s * rng.normal();
        y = tape.add(f, tape.constant(z));
        f = apply(tape, y, levels[l], x);
    }
    return f;
}

Tensor ConsistencyModel::sample_value(const Tensor& x_rows, const std::vector<double>& levels,
                                      Rng& rng) const {
    if (net.cfg.cond_dim <= 0)
        throw std::invalid_argument("ConsistencyModel::sample_value: conditional model required");
    Tape tape;
    Var x = tape.constant(x_rows);
    return sample(tape, x, x_rows.shape()[0], levels, rng).value();
}

int64_t ict_curriculum_size(const IctConfig& cfg, int64_t step, int64_t total_steps) {
    int64_t period = cfg.curriculum_period;
    if (period <= 0) {
        const double doublings = std::log2(static_cast<double>(cfg.s1) / static_cast<double>(cfg.s0)) + 1.0;
        period = std::max<int64_t>(1, static_cast<int64_t>(std::floor(static_cast<double>(total_steps) / doublings)));
    }
    const int64_t k = step / period;
    double n = static_cast<double>(cfg.s0) * std::pow(2.0, static_cast<double>(k));
    n = std::min(n, static_cast<double>(cfg.s1));
    return static_cast<int64_t>(n) + 1;
}

std::vector<double> karras_boundaries(double sigma_min, double sigma_max, int64_t count, double rho) {
    if (count < 2) throw std::invalid_argument("karras_boundaries: need at least 2 levels");
    std::vector<double> out(static_cast<size_t>(count));
    const double lo = std::pow(sigma_min, 1.0 / rho);
    const double hi = std::pow(sigma_max, 1.0 / rho);
    for (int64_t i = 0; i < count; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(count - 1);
        out[static_cast<size_t>(i)] = std::pow(lo + u * (hi - lo), rho);
    }
    return out;
}

std::vector<double> noise_index_weights(const std::vector<double>& boundaries, double p_mean, double p_std) {
    if (boundaries.size() < 2) throw std::invalid_argument("noise_index_weights: need >= 2 boundaries");
    auto cdf = [&](double s) { return 0.5 * (1.0 + std::erf((std::log(s) - p_mean) / (p_std * std::sqrt(2.0)))); };
    std::vector<double> w(boundaries.size() - 1);
    double total = 0.0;
    for (size_t i = 0; i + 1 < boundaries.size(); ++i) {
        w[i] = std::max(cdf(boundaries[i + 1]) - cdf(boundaries[i]), 0.0);
        total += w[i];
    }
    if (!(total > 0.0)) throw std::runtime_error("noise_index_weights: degenerate proposal");
    for (auto& v : w) v /= total;
    return w;
}

Var pseudo_huber(Tape& tape, Var a, Var b, double c) {
    if (!(c > 0.0)) throw std::invalid_argument("pseudo_huber: c must be positive");
    Var sq = tape.sum(tape.square(tape.sub(a, b)));
    return tape.add_scalar(tape.sqrt(tape.add_scalar(sq, c * c)), -c);
}

Var pseudo_huber_rows(Tape& tape, Var a, Var b, double c) {
    if (!(c > 0.0)) throw std::invalid_argument("pseudo_huber: c must be positive");
    const int64_t d = a.value().shape()[1];
    Var sq = tape.matmul(tape.square(tape.sub(a, b)), tape.constant(Tensor::full({d, 1}, 1.0)));
    return tape.add_scalar(tape.sqrt(tape.add_scalar(sq, c * c)), -c);
}

TrainResult ict_train(const BatchSampler& data, ConsistencyModel& model, const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    model.cfg.validate();
    const bool conditional = model.net.cfg.cond_dim > 0;
    const int64_t dy = model.net.cfg.in_dim;

    if (model.cfg.sigma_data == 0.0 || model.cfg.sigma_max == 0.0) {
        // derive the data scale from a presample
        auto [y0, c0] = data(4096, rng);
        double var = 0.0;
        std::vector<double> mean(static_cast<size_t>(dy), 0.0);
        for (int64_t i = 0; i < y0.shape()[0]; ++i)
            for (int64_t j = 0; j < dy; ++j) mean[static_cast<size_t>(j)] += y0.at(i, j);
        for (auto& m : mean) m /= static_cast<double>(y0.shape()[0]);
        for (int64_t i = 0; i < y0.shape()[0]; ++i)
            for (int64_t j = 0; j < dy; ++j) {
                const double dvi = y0.at(i, j) - mean[static_cast<size_t>(j)];
                var += dvi * dvi;
            }
        var /= static_cast<double>(y0.shape()[0] * dy);
        const double sd = std::sqrt(std::max(var, 1e-12));
        if (model.cfg.sigma_data == 0.0) model.cfg.sigma_data = sd;
        if (model.cfg.sigma_max == 0.0)
            model.cfg.sigma_max = std::max(80.0 * sd, model.cfg.sampling_levels.front());
    }
    const double huber_c =
        model.cfg.huber_c_factor * std::sqrt(static_cast<double>(dy)) * model.cfg.sigma_data;

    AdamW opt(&model.net.params, cfg.lr, cfg.weight_decay, cfg.epochs, cfg.cosine_anneal);
    TrainResult result;
    result.loss_curve.reserve(static_cast<size_t>(cfg.epochs));
    double stage_initial = 0.0;
    int64_t last_n = -1;
    int64_t bad_streak = 0;

    for (int64_t step = 0; step < cfg.epochs; ++step) {
        const int64_t N = ict_curriculum_size(model.cfg, step, cfg.epochs);
        auto boundaries = karras_boundaries(model.cfg.sigma_min, model.cfg.sigma_max, N, model.cfg.rho);
        auto weights = noise_index_weights(boundaries, model.cfg.p_mean, model.cfg.p_std);

        auto [y0, cond] = data(cfg.batch_size, rng);
        const int64_t n = y0.shape()[0];
        std::vector<double> sig_lo(static_cast<size_t>(n)), sig_hi(static_cast<size_t>(n)),
            lambda(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            const size_t idx = rng.categorical(weights);
            sig_lo[static_cast<size_t>(i)] = boundaries[idx];
            sig_hi[static_cast<size_t>(i)] = boundaries[idx + 1];
            lambda[static_cast<size_t>(i)] = 1.0 / (boundaries[idx + 1] - boundaries[idx]);
        }
        // shared noise between the adjacent levels
        Tensor y_lo = Tensor::zeros({n, dy}), y_hi = Tensor::zeros({n, dy});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < dy; ++j) {
                const double z = rng.normal();
                y_lo.at(i, j) = y0.at(i, j) + sig_lo[static_cast<size_t>(i)] * z;
                y_hi.at(i, j) = y0.at(i, j) + sig_hi[static_cast<size_t>(i)] * z;
            }

        // stop-gradient self-teacher at the lower level
        Tensor target;
        {
            Tape ttape;
            Var yv = ttape.constant(y_lo);
            Var cv;
            if (conditional) cv = ttape.constant(cond);
            target = model.apply_rows(ttape, yv, sig_lo, cv).value();
        }

        Tape tape;
        Var yv = tape.constant(y_hi);
        Var cv;
        if (conditional) cv = tape.constant(cond);
        std::vector<Var> pvars;
        Var out = model.apply_rows(tape, yv, sig_hi, cv, &pvars);
        Var ph = pseudo_huber_rows(tape, out, tape.constant(target), huber_c);
        Var loss = tape.mean(tape.mul(ph, tape.constant(Tensor::column(lambda))));
        const double loss_val = loss.value().item();
        result.loss_curve.push_back(loss_val);

        if (N != last_n) {  // loss scale shifts at each curriculum change
            stage_initial = loss_val;
            last_n = N;
            bad_streak = 0;
        }
        if (loss_val > cfg.divergence_factor * stage_initial) {
            if (++bad_streak >= cfg.divergence_patience)
                throw std::runtime_error("ict_train: diverged at step " + std::to_string(step));
        } else {
            bad_streak = 0;
        }

        tape.backward(loss);
        std::vector<Tensor> grads;
        grads.reserve(pvars.size());
        for (Var p : pvars) grads.push_back(tape.grad(p));
        opt.step(grads);
    }
    result.final_loss = result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
    return result;
}

}  // namespace cdm
