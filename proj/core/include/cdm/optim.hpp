#pragma once

#include <cstdint>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm {

// Decoupled-weight-decay Adam with an optional cosine-annealed learning
// rate over total_steps.
class AdamW {
public:
    AdamW(std::vector<Tensor>* params, double lr, double weight_decay, int64_t total_steps,
          bool cosine_anneal = true, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(const std::vector<Tensor>& grads);
    double current_lr() const;
    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor>* params_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    double lr_, weight_decay_, beta1_, beta2_, eps_;
    int64_t total_steps_;
    bool cosine_anneal_;
    int64_t t_ = 0;
};

}  // namespace cdm
