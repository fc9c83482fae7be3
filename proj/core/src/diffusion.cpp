#include "cdm/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace cdm {

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive");
    if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("TrainConfig: bad lr or weight_decay");
    if (cfg_dropout < 0.0 || cfg_dropout > 1.0) throw std::invalid_argument("TrainConfig: cfg_dropout out of [0,1]");
}

std::pair<Tensor, Tensor> forward_noise(const Tensor& x0, const std::vector<int64_t>& t,
                                        const NoiseSchedule& schedule, Rng& rng) {
    if (static_cast<int64_t>(t.size()) != x0.shape()[0])
        throw std::invalid_argument("forward_noise: one timestep per row required");
    Tensor eps = Tensor::zeros(x0.shape());
    for (auto& v : eps.data()) v = rng.normal();
    Tensor xt = Tensor::zeros(x0.shape());
    const int64_t d = x0.shape()[1];
    for (int64_t i = 0; i < x0.shape()[0]; ++i) {
        const double ab = schedule.abar(t[static_cast<size_t>(i)]);
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        for (int64_t j = 0; j < d; ++j) xt.at(i, j) = sa * x0.at(i, j) + sb * eps.at(i, j);
    }
    return {xt, eps};
}

TrainResult train_ddpm(const BatchSampler& data, MlpNet& net, const NoiseSchedule& schedule,
                       const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    const bool conditional = net.cfg.cond_dim > 0;
    AdamW opt(&net.params, cfg.lr, cfg.weight_decay, cfg.epochs, cfg.cosine_anneal);
    TrainResult result;
    result.loss_curve.reserve(static_cast<size_t>(cfg.epochs));
    double initial_loss = 0.0;
    int64_t bad_streak = 0;

    for (int64_t step = 0; step < cfg.epochs; ++step) {
        auto [x0, cond] = data(cfg.batch_size, rng);
        const int64_t n = x0.shape()[0];
        std::vector<int64_t> t(static_cast<size_t>(n));
        std::vector<double> t_vals(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            t[static_cast<size_t>(i)] = 1 + rng.uniform_int(schedule.T);
            t_vals[static_cast<size_t>(i)] = static_cast<double>(t[static_cast<size_t>(i)]);
        }
        auto [xt, eps] = forward_noise(x0, t, schedule, rng);
        if (conditional) {
            // classifier-free guidance: zero the conditioning row with
            // probability cfg_dropout
            for (int64_t i = 0; i < n; ++i) {
                if (rng.uniform() < cfg.cfg_dropout)
                    for (int64_t j = 0; j < cond.shape()[1]; ++j) cond.at(i, j) = 0.0;
            }
        }
        Tape tape;
        Var input = tape.constant(xt);
        Var cvar;
        if (conditional) cvar = tape.constant(cond);
        std::vector<Var> pvars;
        Var out = net.forward(tape, input, net.time_embedding(t_vals), cvar, &pvars);
        Var loss = tape.mean(tape.square(tape.sub(out, tape.constant(eps))));
        const double loss_val = loss.value().item();
        result.loss_curve.push_back(loss_val);
        if (step == 0) initial_loss = loss_val;
        if (loss_val > cfg.divergence_factor * initial_loss) {
            if (++bad_streak >= cfg.divergence_patience)
                throw std::runtime_error("train_ddpm: diverged at step " + std::to_string(step));
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

std::pair<double, double> ddim_coeffs(int64_t t, int64_t t_prev, const NoiseSchedule& schedule) {
    if (t_prev > t || t_prev < 0) throw std::invalid_argument("ddim_coeffs: need t >= t_prev >= 0");
    const double ab_t = schedule.abar(t);
    const double ab_p = schedule.abar(t_prev);
    const double a = std::sqrt(ab_p / ab_t);
    const double b = std::sqrt(1.0 - ab_p) - a * std::sqrt(1.0 - ab_t);
    return {a, b};
}

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int64_t t, int64_t t_prev,
                 const NoiseSchedule& schedule) {
    auto [a, b] = ddim_coeffs(t, t_prev, schedule);
    Tensor out(x_t.shape(), x_t.data());
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a * x_t.data()[i] + b * eps_hat.data()[i];
    return out;
}

Tensor tweedie_from_score(const Tensor& x_t, const Tensor& score, int64_t t, const NoiseSchedule& schedule) {
    const double ab = schedule.abar(t);
    if (!(ab > 0.0)) throw std::invalid_argument("tweedie: alpha_bar must be positive");
    Tensor out(x_t.shape(), x_t.data());
    for (int64_t i = 0; i < out.size(); ++i)
        out.data()[i] = (x_t.data()[i] + (1.0 - ab) * score.data()[i]) / std::sqrt(ab);
    return out;
}

Tensor tweedie_from_eps(const Tensor& x_t, const Tensor& eps_hat, int64_t t, const NoiseSchedule& schedule) {
    const double ab = schedule.abar(t);
    if (!(ab > 0.0)) throw std::invalid_argument("tweedie: alpha_bar must be positive");
    // score = -eps / sqrt(1 - abar)
    Tensor out(x_t.shape(), x_t.data());
    const double c = std::sqrt(1.0 - ab);
    for (int64_t i = 0; i < out.size(); ++i)
        out.data()[i] = (x_t.data()[i] - c * eps_hat.data()[i]) / std::sqrt(ab);
    return out;
}

Var tweedie_from_eps(Tape& tape, Var x_t, Var eps_hat, int64_t t, const NoiseSchedule& schedule) {
    const double ab = schedule.abar(t);
    if (!(ab > 0.0)) throw std::invalid_argument("tweedie: alpha_bar must be positive");
    Var scaled = tape.scale(eps_hat, std::sqrt(1.0 - ab));
    return tape.scale(tape.sub(x_t, scaled), 1.0 / std::sqrt(ab));
}

namespace {

Tensor standard_normal(int64_t n, int64_t d, Rng& rng) {
    Tensor t = Tensor::zeros({n, d});
    for (auto& v : t.data()) v = rng.normal();
    return t;
}

}  // namespace

Tensor ddim_sample(const MlpNet& net, const NoiseSchedule& schedule, int64_t n, int64_t n_steps, Rng& rng) {
    const int64_t d = net.cfg.in_dim;
    Tensor x = standard_normal(n, d, rng);
    auto steps = schedule.strided_steps(n_steps);
    for (size_t i = 0; i < steps.size(); ++i) {
        const int64_t t = steps[i];
        const int64_t t_prev = (i + 1 < steps.size()) ? steps[i + 1] : 0;
        Tensor eps = net.forward_value(x, net.time_embedding(static_cast<double>(t), n), Tensor());
        x = ddim_step(x, eps, t, t_prev, schedule);
    }
    return x;
}

Tensor ddim_sample_cond(const MlpNet& net, const NoiseSchedule& schedule, const Tensor& x_rows,
                        int64_t n_steps, Rng& rng) {
    const int64_t n = x_rows.shape()[0];
    const int64_t d = net.cfg.in_dim;
    Tensor y = standard_normal(n, d, rng);
    auto steps = schedule.strided_steps(n_steps);
    for (size_t i = 0; i < steps.size(); ++i) {
        const int64_t t = steps[i];
        const int64_t t_prev = (i + 1 < steps.size()) ? steps[i + 1] : 0;
        Tensor eps = net.forward_value(y, net.time_embedding(static_cast<double>(t), n), x_rows);
        y = ddim_step(y, eps, t, t_prev, schedule);
    }
    return y;
}

Var teacher_sample(Tape& tape, const MlpNet& net, const NoiseSchedule& schedule, Var x, int64_t n,
                   int64_t k_steps, Rng& rng) {
    if (net.cfg.cond_dim <= 0) throw std::invalid_argument("teacher_sample: conditional net required");
    if (x.value().shape() != std::vector<int64_t>{1, net.cfg.cond_dim})
        throw std::invalid_argument("teacher_sample: x must be 1 x cond_dim, got " + x.value().shape_str());
    const int64_t dy = net.cfg.in_dim;
    Var y = tape.constant(standard_normal(n, dy, rng));
    auto steps = schedule.strided_steps(k_steps);
    for (size_t i = 0; i < steps.size(); ++i) {
        const int64_t t = steps[i];
        const int64_t t_prev = (i + 1 < steps.size()) ? steps[i + 1] : 0;
        Var eps = net.forward(tape, y, net.time_embedding(static_cast<double>(t), n), x);
        auto [a, b] = ddim_coeffs(t, t_prev, schedule);
        y = tape.add(tape.scale(y, a), tape.scale(eps, b));
    }
    return y;
}

}  // namespace cdm
