#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cdm/consistency.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/gmm.hpp"
#include "cdm/rng.hpp"
#include "cdm/tape.hpp"

namespace cdm {

// A differentiable conditional sampler f(x, eta): draws n samples of
// P(Y | X = x) on the tape, with gradient flowing back to the conditioning
// Var x (1 x dx). Internal noise comes from rng.
class ConditionalSampler {
public:
    virtual ~ConditionalSampler() = default;
    virtual Var sample(Tape& tape, Var x, int64_t n, Rng& rng) const = 0;
    virtual int64_t x_dim() const = 0;
    virtual int64_t y_dim() const = 0;

    Tensor sample_value(const Tensor& x_row, int64_t n, Rng& rng) const;
};

// Single/few-step consistency sampler (the MLGD-F inner sampler).
class CmSampler : public ConditionalSampler {
public:
    CmSampler(const ConsistencyModel* model, std::vector<double> levels);
    Var sample(Tape& tape, Var x, int64_t n, Rng& rng) const override;
    int64_t x_dim() const override { return model_->net.cfg.cond_dim; }
    int64_t y_dim() const override { return model_->net.cfg.in_dim; }
    const std::vector<double>& levels() const { return levels_; }

private:
    const ConsistencyModel* model_;
    std::vector<double> levels_;
};

// K-step unrolled conditional diffusion (the slow MLGD teacher).
class TeacherSampler : public ConditionalSampler {
public:
    TeacherSampler(const MlpNet* net, const NoiseSchedule* schedule, int64_t k_steps);
    Var sample(Tape& tape, Var x, int64_t n, Rng& rng) const override;
    int64_t x_dim() const override { return net_->cfg.cond_dim; }
    int64_t y_dim() const override { return net_->cfg.in_dim; }
    int64_t k_steps() const { return k_steps_; }

private:
    const MlpNet* net_;
    const NoiseSchedule* schedule_;
    int64_t k_steps_;
};

// Exact conditional of a Gaussian-mixture joint as a reparameterized affine
// map. Component choice follows the conditional weights at the numeric value
// of x and is treated as constant w.r.t. gradients; for single-component
// conditionals the map is the exact reparameterization.
class AnalyticSampler : public ConditionalSampler {
public:
    AnalyticSampler(const GaussianMixture* joint, const SplitIndex* split);
    Var sample(Tape& tape, Var x, int64_t n, Rng& rng) const override;
    int64_t x_dim() const override { return static_cast<int64_t>(split_->x_dims.size()); }
    int64_t y_dim() const override { return static_cast<int64_t>(split_->y_dims.size()); }

private:
    const GaussianMixture* joint_;
    const SplitIndex* split_;
};

// Arbitrary differentiable map built from tape ops; eta is an n x dy noise
// matrix drawn before the call. Used by the fidelity diagnostics.
class SyntheticSampler : public ConditionalSampler {
public:
    using Fn = std::function<Var(Tape&, Var /*x*/, const Tensor& /*eta*/)>;
    SyntheticSampler(Fn fn, int64_t x_dim, int64_t y_dim);
    Var sample(Tape& tape, Var x, int64_t n, Rng& rng) const override;
    int64_t x_dim() const override { return x_dim_; }
    int64_t y_dim() const override { return y_dim_; }

private:
    Fn fn_;
    int64_t x_dim_;
    int64_t y_dim_;
};

}  // namespace cdm
