#include "cdm/guidance.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "cdm/diffusion.hpp"

namespace cdm {

namespace {

uint64_t fnv1a_str(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

double vec_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

// guidance step size for the fixed-schedule rule, derived so that the
// applied term matches the schedule's own score multiplier
double schedule_factor(const NoiseSchedule& schedule, int64_t t, int64_t t_prev,
                       GuidanceConfig::UpdateRule rule) {
    if (rule == GuidanceConfig::UpdateRule::sde) return schedule.beta_between(t, t_prev);
    const auto [a, b] = ddim_coeffs(t, t_prev, schedule);
    return -b * std::sqrt(1.0 - schedule.abar(t));
}

// one denoising update on plain tensors; consumes SDE noise from rng for the
// stochastic rule so guided and unguided trajectories stay stream-aligned
Tensor denoise_update(const Tensor& x, const Tensor& eps_hat, const NoiseSchedule& schedule, int64_t t,
                      int64_t t_prev, GuidanceConfig::UpdateRule rule, Rng& sde_rng) {
    if (rule == GuidanceConfig::UpdateRule::ddim) return ddim_step(x, eps_hat, t, t_prev, schedule);
    const double b = schedule.beta_between(t, t_prev);
    const double inv_std = 1.0 / std::sqrt(1.0 - schedule.abar(t));
    Tensor out(x.shape(), x.data());
    for (int64_t i = 0; i < x.size(); ++i) {
        const double score = -eps_hat.data()[i] * inv_std;
        out.data()[i] = x.data()[i] + 0.5 * b * x.data()[i] + b * score + std::sqrt(b) * sde_rng.normal();
    }
    return out;
}

}  // namespace

void GuidanceConfig::validate() const {
    if (t_outer < 1) throw std::invalid_argument("GuidanceConfig: t_outer must be >= 1");
    if (n_mc < 1 || n_cond < 1 || n_target < 1)
        throw std::invalid_argument("GuidanceConfig: sample counts must be positive");
    if (beta < 0.0) throw std::invalid_argument("GuidanceConfig: beta must be nonnegative");
    if (restarts < 1) throw std::invalid_argument("GuidanceConfig: restarts must be >= 1");
    if (loss.kind == LossSpec::Kind::mmd_u_sqrt && n_cond < 2)
        throw std::invalid_argument("GuidanceConfig: mmd_u needs n_cond >= 2");
    loss.validate();
    if (!zeta_schedule.empty() && static_cast<int64_t>(zeta_schedule.size()) != t_outer)
        throw std::invalid_argument("GuidanceConfig: zeta_schedule length must equal t_outer");
}

std::string GuidanceConfig::hash() const {
    std::ostringstream os;
    os << t_outer << '|' << n_mc << '|' << n_cond << '|' << n_target << '|' << loss.kind_name() << '|'
       << static_cast<int>(loss.kernel.kind) << '|' << static_cast<int>(loss.kernel.bandwidth) << '|'
       << loss.kernel.sigma << '|' << loss.n_projections << '|' << loss.epsilon << '|'
       << static_cast<int>(step_rule) << '|' << zeta_prime << '|' << beta << '|'
       << static_cast<int>(update_rule) << '|' << guidance_clip << '|' << restarts << '|' << reeval_n;
    for (double z : zeta_schedule) os << '|' << z;
    std::ostringstream hex;
    hex << std::hex << fnv1a_str(os.str());
    return hex.str();
}

Var inner_estimate(Tape& tape, Var x, const ConditionalSampler& sampler, const Tensor& target_sample,
                   const LossSpec& loss, int64_t n_cond, Rng& rng) {
    Var cond = sampler.sample(tape, x, n_cond, rng);
    return loss_eval(tape, loss, cond, target_sample, rng);
}

InnerEstimateResult inner_estimate_grad(const Tensor& x_row, const ConditionalSampler& sampler,
                                        const Tensor& target_sample, const LossSpec& loss, int64_t n_cond,
                                        Rng& rng) {
    Tape tape;
    Var x = tape.leaf(x_row, true);
    Var l = inner_estimate(tape, x, sampler, target_sample, loss, n_cond, rng);
    tape.backward(l);
    InnerEstimateResult r;
    r.value = l.value().item();
    r.grad = tape.grad(x);
    auto [depth, nodes] = tape.depth_and_node_count();
    r.tape_depth = depth;
    r.tape_nodes = nodes;
    return r;
}

Tensor plain_reverse_sample(const MlpNet& prior_net, const NoiseSchedule& schedule, int64_t t_outer,
                            GuidanceConfig::UpdateRule rule, const Rng& run_rng) {
    Rng init_rng = run_rng.fork("init");
    Rng sde_rng = run_rng.fork("sde");
    const int64_t dx = prior_net.cfg.in_dim;
    Tensor x = Tensor::zeros({1, dx});
    for (auto& v : x.data()) v = init_rng.normal();
    auto steps = schedule.strided_steps(t_outer);
    for (size_t i = 0; i < steps.size(); ++i) {
        const int64_t t = steps[i];
        const int64_t t_prev = (i + 1 < steps.size()) ? steps[i + 1] : 0;
        Tensor eps = prior_net.forward_value(x, prior_net.time_embedding(static_cast<double>(t), 1), Tensor());
        x = denoise_update(x, eps, schedule, t, t_prev, rule, sde_rng);
    }
    return x;
}

GuidanceRun mlgd_outer(const MlpNet& prior_net, const NoiseSchedule& schedule,
                       const ConditionalSampler& sampler, const GaussianMixture& target,
                       const GuidanceConfig& cfg, const Rng& run_rng, int64_t run_index) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    GuidanceRun run;
    run.run_index = run_index;
    run.config_hash = cfg.hash();

    const int64_t dx = prior_net.cfg.in_dim;
    Rng init_rng = run_rng.fork("init");
    Rng sde_rng = run_rng.fork("sde");
    Rng guid_rng = run_rng.fork("guidance");
    Rng target_rng = run_rng.fork("target");

    // target sample drawn once, reused at every step
    Tensor target_sample = target.sample(cfg.n_target, target_rng);

    Tensor x = Tensor::zeros({1, dx});
    for (auto& v : x.data()) v = init_rng.normal();

    const bool guided = cfg.beta > 0.0;
    auto steps = schedule.strided_steps(cfg.t_outer);
    run.loss_trace.reserve(steps.size());

    for (size_t i = 0; i < steps.size(); ++i) {
        const int64_t t = steps[i];
        const int64_t t_prev = (i + 1 < steps.size()) ? steps[i + 1] : 0;

        Tensor guidance_grad;
        if (guided) {
            try {
                Tape tape;
                Var xt = tape.leaf(x, true);
                Var eps = prior_net.forward(tape, xt, prior_net.time_embedding(static_cast<double>(t), 1), Var{});
                Var x0 = tweedie_from_eps(tape, xt, eps, t, schedule);
                const double ps = schedule.perturb_scale(t);
                std::vector<Var> losses;
                losses.reserve(static_cast<size_t>(cfg.n_mc));
                for (int64_t mc = 0; mc < cfg.n_mc; ++mc) {
                    Tensor xi = Tensor::zeros({1, dx});
                    for (auto& v : xi.data()) v = ps * guid_rng.normal();
                    Var pert = tape.add(x0, tape.constant(xi));
                    losses.push_back(
                        inner_estimate(tape, pert, sampler, target_sample, cfg.loss, cfg.n_cond, guid_rng));
                }
                Var total;
                if (cfg.n_mc == 1) {
                    total = losses[0];
                } else {
                    Var lvec = tape.concat(losses, 0);
                    total = tape.neg(tape.log(tape.mean(tape.exp(tape.neg(lvec)))));
                }
                run.loss_trace.push_back(total.value().item());
                tape.backward(total);
                guidance_grad = tape.grad(xt);
                auto [depth, nodes] = tape.depth_and_node_count();
                run.max_tape_depth = std::max(run.max_tape_depth, depth);
                run.max_tape_nodes = std::max(run.max_tape_nodes, nodes);
                if (!guidance_grad.all_finite()) throw std::domain_error("non-finite guidance gradient");
            } catch (const std::domain_error&) {
                run.failed = true;
                run.failed_step = static_cast<int64_t>(i);
                break;
            }
        } else {
            run.loss_trace.push_back(std::numeric_limits<double>::quiet_NaN());
        }

        Tensor eps = prior_net.forward_value(x, prior_net.time_embedding(static_cast<double>(t), 1), Tensor());
        Tensor x_next = denoise_update(x, eps, schedule, t, t_prev, cfg.update_rule, sde_rng);

        if (guided) {
            double zeta;
            if (cfg.step_rule == GuidanceConfig::StepRule::dps_normalized) {
                const double norm = vec_norm(guidance_grad);
                zeta = norm > 0.0 ? cfg.beta * cfg.zeta_prime / norm : 0.0;
            } else if (!cfg.zeta_schedule.empty()) {
                zeta = cfg.beta * cfg.zeta_schedule[i];
            } else {
                zeta = cfg.beta * schedule_factor(schedule, t, t_prev, cfg.update_rule);
            }
            Tensor step_vec(guidance_grad.shape(), guidance_grad.data());
            for (auto& v : step_vec.data()) v *= zeta;
            if (cfg.guidance_clip > 0.0) {
                const double norm = vec_norm(step_vec);
                if (norm > cfg.guidance_clip)
                    for (auto& v : step_vec.data()) v *= cfg.guidance_clip / norm;
            }
            for (int64_t k = 0; k < x_next.size(); ++k) x_next.data()[k] -= step_vec.data()[k];
        }

        if (!x_next.all_finite()) {
            run.failed = true;
            run.failed_step = static_cast<int64_t>(i);
            break;
        }
        x = x_next;
    }

    if (!run.failed) {
        run.x0.assign(x.data().begin(), x.data().end());
        // keep the trace length contract when beta = 0 padded nothing
        while (run.loss_trace.size() < steps.size())
            run.loss_trace.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    run.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return run;
}

CdmoResult cdmo(const MlpNet& prior_net, const NoiseSchedule& schedule, const ConditionalSampler& sampler,
                const GaussianMixture& target, const GuidanceConfig& cfg, uint64_t master_seed,
                int64_t n_threads) {
    cfg.validate();
    Rng root(master_seed);
    CdmoResult result;
    result.runs.resize(static_cast<size_t>(cfg.restarts));

    if (n_threads <= 0)
        n_threads = std::min<int64_t>(cfg.restarts, static_cast<int64_t>(std::thread::hardware_concurrency()));
    n_threads = std::max<int64_t>(1, n_threads);

    std::atomic<int64_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const int64_t r = next.fetch_add(1);
            if (r >= cfg.restarts) return;
            Rng run_rng = root.fork("run").fork(static_cast<uint64_t>(r));
            GuidanceRun gr = mlgd_outer(prior_net, schedule, sampler, target, cfg, run_rng, r);
            gr.seed = master_seed;
            if (!gr.failed) {
                // fresh large-n loss estimate for ranking
                Rng reeval_rng = run_rng.fork("reeval");
                Tensor x_row = Tensor::row(gr.x0);
                Tensor cond = sampler.sample_value(x_row, cfg.reeval_n, reeval_rng);
                Tensor tgt = target.sample(cfg.reeval_n, reeval_rng);
                gr.final_loss = loss_value(cfg.loss, cond, tgt, reeval_rng);
            } else {
                gr.final_loss = std::numeric_limits<double>::quiet_NaN();
            }
            result.runs[static_cast<size_t>(r)] = std::move(gr);
        }
    };
    std::vector<std::thread> pool;
    for (int64_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    for (int64_t r = 0; r < cfg.restarts; ++r)
        if (!result.runs[static_cast<size_t>(r)].failed) result.ranking.push_back(r);
    if (result.ranking.empty()) {
        std::ostringstream os;
        os << "cdmo: all " << cfg.restarts << " runs failed at steps [";
        for (const auto& r : result.runs) os << r.failed_step << ' ';
        os << "]";
        throw std::runtime_error(os.str());
    }
    std::stable_sort(result.ranking.begin(), result.ranking.end(), [&](int64_t a, int64_t b) {
        return result.runs[static_cast<size_t>(a)].final_loss < result.runs[static_cast<size_t>(b)].final_loss;
    });
    result.best_index = result.ranking.front();
    return result;
}

BetaSweepResult cdms_sweep(const MlpNet& prior_net, const NoiseSchedule& schedule,
                           const GaussianMixture& prior_analytic, const std::function<double(double)>& loss_fn,
                           double x_star, const std::vector<double>& betas, int64_t runs_per_beta,
                           int64_t n_steps, GuidanceConfig::UpdateRule rule, double guidance_clip,
                           uint64_t master_seed) {
    if (prior_net.cfg.in_dim != 1) throw std::invalid_argument("cdms_sweep: 1-D X setting required");
    if (betas.empty() || runs_per_beta < 1) throw std::invalid_argument("cdms_sweep: empty sweep");

    BetaSweepResult out;
    out.betas = betas;
    out.largest_beta_grid = tilted_reference_grid(x_star);
    Rng root(master_seed);

    auto steps = schedule.strided_steps(n_steps);
    const int64_t n = runs_per_beta;

    for (size_t bi = 0; bi < betas.size(); ++bi) {
        const double beta = betas[bi];
        Rng beta_rng = root.fork("beta").fork(bi);
        Rng init_rng = beta_rng.fork("init");
        Rng sde_rng = beta_rng.fork("sde");

        Tensor x = Tensor::zeros({n, 1});
        for (auto& v : x.data()) v = init_rng.normal();

        for (size_t i = 0; i < steps.size(); ++i) {
            const int64_t t = steps[i];
            const int64_t t_prev = (i + 1 < steps.size()) ? steps[i + 1] : 0;

            Tensor eps_val;
            Tensor grad = Tensor::zeros({n, 1});
            if (beta > 0.0) {
                Tape tape;
                Var xt = tape.leaf(x, true);
                Var eps =
                    prior_net.forward(tape, xt, prior_net.time_embedding(static_cast<double>(t), n), Var{});
                Var x0 = tweedie_from_eps(tape, xt, eps, t, schedule);
                eps_val = eps.value();
                // analytic loss gradient at the Tweedie point, row by row
                const double h = 1e-5;
                Tensor g0 = Tensor::zeros({n, 1});
                for (int64_t r = 0; r < n; ++r) {
                    const double v = x0.value().at(r, 0);
                    g0.at(r, 0) = (loss_fn(v + h) - loss_fn(v - h)) / (2.0 * h);
                }
                // VJP seed: sum(x0 * g0) backpropagates g0 through Tweedie
                Var seed = tape.sum(tape.mul(x0, tape.constant(g0)));
                tape.backward(seed);
                grad = tape.grad(xt);
            } else {
                eps_val =
                    prior_net.forward_value(x, prior_net.time_embedding(static_cast<double>(t), n), Tensor());
            }

            Tensor x_next = denoise_update(x, eps_val, schedule, t, t_prev, rule, sde_rng);
            if (beta > 0.0) {
                const double h_t = schedule_factor(schedule, t, t_prev, rule);
                for (int64_t r = 0; r < n; ++r) {
                    double step_val = beta * h_t * grad.at(r, 0);
                    if (guidance_clip > 0.0) step_val = std::clamp(step_val, -guidance_clip, guidance_clip);
                    x_next.at(r, 0) -= step_val;
                }
            }
            if (!x_next.all_finite()) throw std::runtime_error("cdms_sweep: non-finite state in beta sweep");
            x = x_next;
        }

        std::vector<double> samples(static_cast<size_t>(n));
        for (int64_t r = 0; r < n; ++r) samples[static_cast<size_t>(r)] = x.at(r, 0);
        out.samples.push_back(samples);

        TiltedPosterior tp{prior_analytic, beta, loss_fn};
        auto density = tilted_density(tp, out.largest_beta_grid);
        // W1 between the empirical sample and the grid density via CDFs
        std::vector<double> sorted = samples;
        std::sort(sorted.begin(), sorted.end());
        const auto& grid = out.largest_beta_grid;
        double w1 = 0.0;
        double f_q = 0.0;
        for (size_t gi = 0; gi + 1 < grid.size(); ++gi) {
            const double dx = grid[gi + 1] - grid[gi];
            const double f_q_next = f_q + 0.5 * (density[gi] + density[gi + 1]) * dx;
            const auto count =
                std::upper_bound(sorted.begin(), sorted.end(), grid[gi]) - sorted.begin();
            const double f_e = static_cast<double>(count) / static_cast<double>(n);
            w1 += std::fabs(f_e - std::min(f_q, 1.0)) * dx;
            f_q = f_q_next;
        }
        out.w1_to_tilted.push_back(w1);
    }
    return out;
}

}  // namespace cdm
