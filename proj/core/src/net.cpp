#include "cdm/net.hpp"

#include <cmath>
#include <stdexcept>

namespace cdm {

void MlpConfig::validate() const {
    if (in_dim < 1 || out_dim < 1 || units < 1 || blocks < 1)
        throw std::invalid_argument("MlpConfig: dimensions and blocks must be positive");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw std::invalid_argument("MlpConfig: time_embed_dim must be even and >= 2");
    if (cond_dim < 0) throw std::invalid_argument("MlpConfig: cond_dim must be nonnegative");
}

namespace {

Tensor init_linear(int64_t rows, int64_t cols, double gain, Rng& rng) {
    Tensor w = Tensor::zeros({rows, cols});
    const double std = gain / std::sqrt(static_cast<double>(rows));
    for (auto& v : w.data()) v = rng.normal(0.0, std);
    return w;
}

}  // namespace

MlpNet MlpNet::init(const MlpConfig& cfg, Rng& rng) {
    cfg.validate();
    MlpNet net;
    net.cfg = cfg;
    auto push = [&](const std::string& name, Tensor t) {
        net.param_names.push_back(name);
        net.params.push_back(std::move(t));
    };
    push("w_in", init_linear(cfg.in_dim, cfg.units, 1.0, rng));
    push("b_in", Tensor::zeros({1, cfg.units}));
    push("w_time", init_linear(cfg.time_embed_dim, cfg.units, 1.0, rng));
    if (cfg.cond_dim > 0) push("w_cond", init_linear(cfg.cond_dim, cfg.units, 1.0, rng));
    for (int64_t b = 1; b < cfg.blocks; ++b) {
        push("w_h" + std::to_string(b), init_linear(cfg.units, cfg.units, 1.0, rng));
        push("b_h" + std::to_string(b), Tensor::zeros({1, cfg.units}));
    }
    // small output init keeps the eps-prediction near zero at start
    push("w_out", init_linear(cfg.units, cfg.out_dim, 0.1, rng));
    push("b_out", Tensor::zeros({1, cfg.out_dim}));
    return net;
}

Var MlpNet::forward(Tape& tape, Var input, const Tensor& time_embed, Var cond,
                    std::vector<Var>* param_vars) const {
    const int64_t n = input.value().shape()[0];
    if (input.value().shape()[1] != cfg.in_dim)
        throw std::invalid_argument("MlpNet: input dim mismatch, got " + input.value().shape_str());
    if (time_embed.shape() != std::vector<int64_t>{n, cfg.time_embed_dim})
        throw std::invalid_argument("MlpNet: time embedding shape mismatch, got " + time_embed.shape_str());
    if ((cfg.cond_dim > 0) != cond.valid())
        throw std::invalid_argument("MlpNet: conditioning presence does not match config");

    std::vector<Var> pv;
    pv.reserve(params.size());
    for (const auto& p : params) pv.push_back(param_vars ? tape.leaf(p, true) : tape.constant(p));
    if (param_vars) *param_vars = pv;
    size_t pi = 0;
    auto next = [&]() { return pv[pi++]; };

    Var w_in = next(), b_in = next(), w_time = next();
    Var h = tape.add(tape.matmul(input, w_in), tape.broadcast(b_in, {n, cfg.units}));
    h = tape.add(h, tape.matmul(tape.constant(time_embed), w_time));
    if (cfg.cond_dim > 0) {
        Var w_cond = next();
        if (cond.value().shape()[0] == 1 && n != 1) cond = tape.broadcast(cond, {n, cfg.cond_dim});
        if (cond.value().shape() != std::vector<int64_t>{n, cfg.cond_dim})
            throw std::invalid_argument("MlpNet: cond shape mismatch, got " + cond.value().shape_str());
        h = tape.add(h, tape.matmul(cond, w_cond));
    }
    h = tape.silu(h);
    for (int64_t b = 1; b < cfg.blocks; ++b) {
        Var w = next(), bb = next();
        h = tape.silu(tape.add(tape.matmul(h, w), tape.broadcast(bb, {n, cfg.units})));
    }
    Var w_out = next(), b_out = next();
    return tape.add(tape.matmul(h, w_out), tape.broadcast(b_out, {n, cfg.out_dim}));
}

Tensor MlpNet::forward_value(const Tensor& input, const Tensor& time_embed, const Tensor& cond) const {
    Tape tape;
    Var in = tape.constant(input);
    Var c;
    if (cfg.cond_dim > 0) c = tape.constant(cond);
    return forward(tape, in, time_embed, c).value();
}

Tensor MlpNet::time_embedding(const std::vector<double>& t) const {
    const int64_t half = cfg.time_embed_dim / 2;
    Tensor emb = Tensor::zeros({static_cast<int64_t>(t.size()), cfg.time_embed_dim});
    for (size_t i = 0; i < t.size(); ++i) {
        const double u = t[i] * cfg.time_scale;
        for (int64_t j = 0; j < half; ++j) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(j) / std::max<double>(1.0, static_cast<double>(half - 1)));
            emb.at(static_cast<int64_t>(i), j) = std::sin(u * freq);
            emb.at(static_cast<int64_t>(i), half + j) = std::cos(u * freq);
        }
    }
    return emb;
}

Tensor MlpNet::time_embedding(double t, int64_t n) const {
    return time_embedding(std::vector<double>(static_cast<size_t>(n), t));
}

int64_t MlpNet::param_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

Tensor& MlpNet::param(const std::string& name) {
    for (size_t i = 0; i < param_names.size(); ++i)
        if (param_names[i] == name) return params[i];
    throw std::out_of_range("MlpNet: no parameter named " + name);
}

const Tensor& MlpNet::param(const std::string& name) const {
    return const_cast<MlpNet*>(this)->param(name);
}

}  // namespace cdm
