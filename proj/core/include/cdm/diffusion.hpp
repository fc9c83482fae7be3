#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "cdm/net.hpp"
#include "cdm/rng.hpp"
#include "cdm/schedule.hpp"
#include "cdm/tape.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

struct TrainConfig {
    int64_t epochs = 20000;  // optimization steps, one fresh batch each
    int64_t batch_size = 1024;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    bool cosine_anneal = true;
    double cfg_dropout = 0.2;  // conditional nets only
    // abort when loss exceeds guard_factor x initial loss this many steps in a row
    int64_t divergence_patience = 100;
    double divergence_factor = 10.0;

    void validate() const;
};

// Yields a batch: data rows (n x d) and, for conditional training,
// conditioning rows (n x dc); unconditional samplers return an empty cond.
using BatchSampler = std::function<std::pair<Tensor, Tensor>(int64_t n, Rng& rng)>;

struct TrainResult {
    std::vector<double> loss_curve;
    double final_loss = 0.0;
};

// q(x_t | x_0) draw: returns the noised state and the drawn eps.
std::pair<Tensor, Tensor> forward_noise(const Tensor& x0, const std::vector<int64_t>& t,
                                        const NoiseSchedule& schedule, Rng& rng);

// Epsilon-prediction DDPM training (AdamW, cosine anneal); conditional nets
// get classifier-free-guidance dropout on the conditioning rows.
TrainResult train_ddpm(const BatchSampler& data, MlpNet& net, const NoiseSchedule& schedule,
                       const TrainConfig& cfg, Rng& rng);

// One deterministic reverse-DDIM update (eta = 0).
Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int64_t t, int64_t t_prev,
                 const NoiseSchedule& schedule);
// Affine coefficients (a, b) with x_{t_prev} = a x_t + b eps_hat.
std::pair<double, double> ddim_coeffs(int64_t t, int64_t t_prev, const NoiseSchedule& schedule);

// Tweedie posterior-mean estimate of the clean sample.
Tensor tweedie_from_score(const Tensor& x_t, const Tensor& score, int64_t t, const NoiseSchedule& schedule);
Tensor tweedie_from_eps(const Tensor& x_t, const Tensor& eps_hat, int64_t t, const NoiseSchedule& schedule);
Var tweedie_from_eps(Tape& tape, Var x_t, Var eps_hat, int64_t t, const NoiseSchedule& schedule);

// Full deterministic DDIM reverse chain of the unconditional net; x_T drawn
// from N(0, I). Steps may stride the schedule.
Tensor ddim_sample(const MlpNet& net, const NoiseSchedule& schedule, int64_t n, int64_t n_steps, Rng& rng);

// Conditional reverse chain: n samples of P(Y | X = x) for constant x rows.
Tensor ddim_sample_cond(const MlpNet& net, const NoiseSchedule& schedule, const Tensor& x_rows,
                        int64_t n_steps, Rng& rng);

// K-step unrolled conditional chain recorded on the tape with gradient
// flowing to the conditioning x (1 x dx); returns n x dy samples.
Var teacher_sample(Tape& tape, const MlpNet& net, const NoiseSchedule& schedule, Var x, int64_t n,
                   int64_t k_steps, Rng& rng);

}  // namespace cdm
