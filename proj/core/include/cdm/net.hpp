#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdm/rng.hpp"
#include "cdm/tape.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Fully connected net with sinusoidal time embeddings added to the first
// hidden state, plus an optional linear conditioning projection added the
// same way. Activation is SiLU throughout.
struct MlpConfig {
    int64_t in_dim = 1;
    int64_t out_dim = 1;
    int64_t blocks = 3;
    int64_t units = 128;
    int64_t time_embed_dim = 64;
    int64_t cond_dim = 0;     // 0 = unconditional
    double time_scale = 1.0;  // multiplies the raw time value before embedding

    void validate() const;
    bool operator==(const MlpConfig&) const = default;
};

struct MlpNet {
    MlpConfig cfg;
    std::vector<std::string> param_names;
    std::vector<Tensor> params;

    static MlpNet init(const MlpConfig& cfg, Rng& rng);

    // Records one application on the tape. When param_vars is non-null the
    // parameters become gradient leaves (training); otherwise they enter as
    // constants and only the inputs can carry gradient.
    //
    // input: n x in_dim; time_embed: n x time_embed_dim rows (constant);
    // cond: invalid Var for unconditional nets, else n x cond_dim.
    Var forward(Tape& tape, Var input, const Tensor& time_embed, Var cond,
                std::vector<Var>* param_vars = nullptr) const;

    // Plain evaluation without gradient bookkeeping.
    Tensor forward_value(const Tensor& input, const Tensor& time_embed, const Tensor& cond) const;

    // Sinusoidal embedding rows for per-row time values.
    Tensor time_embedding(const std::vector<double>& t) const;
    Tensor time_embedding(double t, int64_t n) const;

    int64_t param_count() const;
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
};

}  // namespace cdm
