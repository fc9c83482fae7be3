#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cdm/losses.hpp"
#include "cdm/net.hpp"
#include "cdm/rng.hpp"
#include "cdm/sampler.hpp"
#include "cdm/schedule.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

struct GuidanceConfig {
    int64_t t_outer = 50;   // outer reverse steps (DDIM stride over the schedule)
    int64_t n_mc = 3;       // MC perturbations of the Tweedie point
    int64_t n_cond = 250;   // conditional samples per candidate
    int64_t n_target = 250; // target samples, drawn once per run
    LossSpec loss;

    enum class StepRule { dps_normalized, fixed_schedule };
    StepRule step_rule = StepRule::dps_normalized;
    double zeta_prime = 0.5;              // DPS step size (applied-gradient norm)
    std::vector<double> zeta_schedule;    // optional per-step override for fixed_schedule

    // Inverse temperature; multiplies the step size (absorbed) and gates the
    // guidance branch: beta = 0 skips it entirely so the trajectory matches
    // the plain reverse sampler bit for bit.
    double beta = 1.0;

    enum class UpdateRule { sde, ddim };
    UpdateRule update_rule = UpdateRule::sde;
    double guidance_clip = 3.0;  // max norm of one applied guidance step; 0 = off

    int64_t restarts = 25;
    int64_t reeval_n = 2000;  // fresh-loss sample size for final ranking

    void validate() const;
    std::string hash() const;
};

// One restart trajectory.
struct GuidanceRun {
    int64_t run_index = 0;
    uint64_t seed = 0;  // master seed the run streams derive from
    bool failed = false;
    int64_t failed_step = -1;
    std::vector<double> x0;
    std::vector<double> loss_trace;  // aggregate guidance loss per step (NaN when beta = 0)
    double final_loss = 0.0;         // fresh large-n estimate, filled by cdmo
    double wall_seconds = 0.0;
    int64_t max_tape_depth = 0;
    int64_t max_tape_nodes = 0;
    std::string config_hash;
};

// Inner estimator: loss between f(x, .) samples and the fixed target sample,
// recorded on the tape; gradient reaches x through the sampler.
Var inner_estimate(Tape& tape, Var x, const ConditionalSampler& sampler, const Tensor& target_sample,
                   const LossSpec& loss, int64_t n_cond, Rng& rng);

struct InnerEstimateResult {
    double value = 0.0;
    Tensor grad;
    int64_t tape_nodes = 0;
    int64_t tape_depth = 0;
};
InnerEstimateResult inner_estimate_grad(const Tensor& x_row, const ConditionalSampler& sampler,
                                        const Tensor& target_sample, const LossSpec& loss, int64_t n_cond,
                                        Rng& rng);

// Plain reverse sampler sharing the guidance engine's exact update and RNG
// stream layout; mlgd_outer with beta = 0 reproduces it bit for bit.
Tensor plain_reverse_sample(const MlpNet& prior_net, const NoiseSchedule& schedule, int64_t t_outer,
                            GuidanceConfig::UpdateRule rule, const Rng& run_rng);

// Loss-guided reverse diffusion (outer loop with MC perturbations,
// log-sum-exp aggregation, SDE- or DDIM-form update).
GuidanceRun mlgd_outer(const MlpNet& prior_net, const NoiseSchedule& schedule,
                       const ConditionalSampler& sampler, const GaussianMixture& target,
                       const GuidanceConfig& cfg, const Rng& run_rng, int64_t run_index);

struct CdmoResult {
    std::vector<GuidanceRun> runs;  // indexed by restart
    std::vector<int64_t> ranking;   // non-failed run indices by ascending final_loss
    int64_t best_index = -1;
};

// R independent restarts (parallel across threads, deterministic per-run
// streams), each re-evaluated with a fresh large-n loss before ranking.
CdmoResult cdmo(const MlpNet& prior_net, const NoiseSchedule& schedule, const ConditionalSampler& sampler,
                const GaussianMixture& target, const GuidanceConfig& cfg, uint64_t master_seed,
                int64_t n_threads = 0);

struct BetaSweepResult {
    std::vector<double> betas;
    std::vector<std::vector<double>> samples;  // per beta, one x0 per run
    std::vector<double> w1_to_tilted;          // W1(empirical, analytic Q_beta)
    std::vector<double> largest_beta_grid;     // reference grid used for Q_beta
};

// CDMS beta sweep on a 1-D X prior with an analytic loss as the guidance
// signal (no inner estimator); runs are batched rows of one trajectory
// ensemble per beta.
BetaSweepResult cdms_sweep(const MlpNet& prior_net, const NoiseSchedule& schedule,
                           const GaussianMixture& prior_analytic, const std::function<double(double)>& loss_fn,
                           double x_star, const std::vector<double>& betas, int64_t runs_per_beta,
                           int64_t n_steps, GuidanceConfig::UpdateRule rule, double guidance_clip,
                           uint64_t master_seed);

}  // namespace cdm
