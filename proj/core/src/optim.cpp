#include "cdm/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cdm {

AdamW::AdamW(std::vector<Tensor>* params, double lr, double weight_decay, int64_t total_steps,
             bool cosine_anneal, double beta1, double beta2, double eps)
    : params_(params),
      lr_(lr),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      total_steps_(total_steps),
      cosine_anneal_(cosine_anneal) {
    if (!params_) throw std::invalid_argument("AdamW: null parameter list");
    for (const auto& p : *params_) {
        m_.push_back(Tensor::zeros(p.shape()));
        v_.push_back(Tensor::zeros(p.shape()));
    }
}

double AdamW::current_lr() const {
    if (!cosine_anneal_ || total_steps_ <= 1) return lr_;
    const double frac = std::min(1.0, static_cast<double>(t_) / static_cast<double>(total_steps_));
    return lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void AdamW::step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_->size()) throw std::invalid_argument("AdamW: gradient count mismatch");
    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_->size(); ++k) {
        Tensor& p = (*params_)[k];
        const Tensor& g = grads[k];
        if (!p.same_shape(g)) throw std::invalid_argument("AdamW: gradient shape mismatch");
        auto& m = m_[k].data();
        auto& v = v_[k].data();
        for (int64_t i = 0; i < p.size(); ++i) {
            const double gi = g.data()[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.data()[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p.data()[i]);
        }
    }
}

}  // namespace cdm
