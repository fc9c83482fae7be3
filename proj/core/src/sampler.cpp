#include "cdm/sampler.hpp"

#include <Eigen/Dense>
#include <numeric>
#include <stdexcept>

namespace cdm {

Tensor ConditionalSampler::sample_value(const Tensor& x_row, int64_t n, Rng& rng) const {
    Tape tape;
    Var x = tape.constant(x_row);
    return sample(tape, x, n, rng).value();
}

CmSampler::CmSampler(const ConsistencyModel* model, std::vector<double> levels)
    : model_(model), levels_(std::move(levels)) {
    if (!model_) throw std::invalid_argument("CmSampler: null model");
    if (levels_.empty()) levels_ = model_->single_step_levels();
}

Var CmSampler::sample(Tape& tape, Var x, int64_t n, Rng& rng) const {
    return model_->sample(tape, x, n, levels_, rng);
}

TeacherSampler::TeacherSampler(const MlpNet* net, const NoiseSchedule* schedule, int64_t k_steps)
    : net_(net), schedule_(schedule), k_steps_(k_steps) {
    if (!net_ || !schedule_) throw std::invalid_argument("TeacherSampler: null net or schedule");
    if (k_steps_ < 1) throw std::invalid_argument("TeacherSampler: k_steps must be >= 1");
}

Var TeacherSampler::sample(Tape& tape, Var x, int64_t n, Rng& rng) const {
    return teacher_sample(tape, *net_, *schedule_, x, n, k_steps_, rng);
}

AnalyticSampler::AnalyticSampler(const GaussianMixture* joint, const SplitIndex* split)
    : joint_(joint), split_(split) {
    if (!joint_ || !split_) throw std::invalid_argument("AnalyticSampler: null joint or split");
    split_->validate(joint_->dim());
}

Var AnalyticSampler::sample(Tape& tape, Var x, int64_t n, Rng& rng) const {
    const auto nx = static_cast<Eigen::Index>(split_->x_dims.size());
    const auto ny = static_cast<Eigen::Index>(split_->y_dims.size());
    if (x.value().shape() != std::vector<int64_t>{1, nx})
        throw std::invalid_argument("AnalyticSampler: x must be 1 x dx, got " + x.value().shape_str());

    Eigen::VectorXd xv(nx);
    for (Eigen::Index i = 0; i < nx; ++i) xv[i] = x.value().data()[static_cast<size_t>(i)];

    // conditional weights at the numeric value of x (frozen w.r.t. grad)
    GaussianMixture cond = condition(*joint_, *split_, xv, 0.0);

    // per-component affine pieces: y = my_k + G_k (x - mx_k) + L_k z
    struct Piece {
        Eigen::VectorXd mx, my;
        Eigen::MatrixXd gain, chol;
    };
    std::vector<Piece> pieces(joint_->components());
    for (size_t k = 0; k < joint_->components(); ++k) {
        Piece& p = pieces[k];
        p.mx.resize(nx);
        p.my.resize(ny);
        Eigen::MatrixXd sxx(nx, nx), syx(ny, nx);
        for (Eigen::Index i = 0; i < nx; ++i) {
            p.mx[i] = joint_->means[k][split_->x_dims[static_cast<size_t>(i)]];
            for (Eigen::Index j = 0; j < nx; ++j)
                sxx(i, j) = joint_->covariances[k](split_->x_dims[static_cast<size_t>(i)],
                                                   split_->x_dims[static_cast<size_t>(j)]);
        }
        for (Eigen::Index i = 0; i < ny; ++i) {
            p.my[i] = joint_->means[k][split_->y_dims[static_cast<size_t>(i)]];
            for (Eigen::Index j = 0; j < nx; ++j)
                syx(i, j) = joint_->covariances[k](split_->y_dims[static_cast<size_t>(i)],
                                                   split_->x_dims[static_cast<size_t>(j)]);
        }
        Eigen::LLT<Eigen::MatrixXd> llt(sxx);
        p.gain = llt.solve(syx.transpose()).transpose();
        p.chol = Eigen::MatrixXd(Eigen::LLT<Eigen::MatrixXd>(cond.covariances[k]).matrixL());
    }

    // draw per-row components, then group rows by component so each group is
    // one affine map; reassemble in original row order afterwards
    std::vector<size_t> comp(static_cast<size_t>(n));
    for (auto& c : comp) c = rng.categorical(cond.weights);

    std::vector<Var> group_vars;
    std::vector<int64_t> order;
    order.reserve(static_cast<size_t>(n));
    for (size_t k = 0; k < joint_->components(); ++k) {
        std::vector<int64_t> rows;
        for (int64_t i = 0; i < n; ++i)
            if (comp[static_cast<size_t>(i)] == k) rows.push_back(i);
        if (rows.empty()) continue;
        const auto m = static_cast<int64_t>(rows.size());
        const Piece& p = pieces[k];
        // offset rows: my - G mx + L z
        Tensor offs = Tensor::zeros({m, ny});
        Eigen::VectorXd base = p.my - p.gain * p.mx;
        for (int64_t r = 0; r < m; ++r) {
            Eigen::VectorXd z(ny);
            for (Eigen::Index j = 0; j < ny; ++j) z[j] = rng.normal();
            Eigen::VectorXd row = base + p.chol * z;
            for (Eigen::Index j = 0; j < ny; ++j) offs.at(r, j) = row[j];
        }
        Tensor gain_t = Tensor::zeros({nx, ny});  // used as x (1 x nx) @ gain^T
        for (Eigen::Index i = 0; i < ny; ++i)
            for (Eigen::Index j = 0; j < nx; ++j) gain_t.at(j, i) = p.gain(i, j);
        Var gx = tape.matmul(x, tape.constant(gain_t));            // 1 x ny
        Var gx_rows = tape.broadcast(gx, {m, ny});
        group_vars.push_back(tape.add(gx_rows, tape.constant(offs)));
        order.insert(order.end(), rows.begin(), rows.end());
    }
    Var stacked = group_vars.size() == 1 ? group_vars[0] : tape.concat(group_vars, 0);
    if (static_cast<int64_t>(order.size()) != n) throw std::logic_error("AnalyticSampler: row bookkeeping failed");
    // inverse permutation restores the drawn row order
    std::vector<int64_t> inv(order.size());
    for (size_t i = 0; i < order.size(); ++i) inv[static_cast<size_t>(order[i])] = static_cast<int64_t>(i);
    bool identity = true;
    for (size_t i = 0; i < inv.size(); ++i) identity = identity && inv[i] == static_cast<int64_t>(i);
    return identity ? stacked : tape.index_select(stacked, 0, inv);
}

SyntheticSampler::SyntheticSampler(Fn fn, int64_t x_dim, int64_t y_dim)
    : fn_(std::move(fn)), x_dim_(x_dim), y_dim_(y_dim) {
    if (!fn_) throw std::invalid_argument("SyntheticSampler: null function");
}

Var SyntheticSampler::sample(Tape& tape, Var x, int64_t n, Rng& rng) const {
    Tensor eta = Tensor::zeros({n, y_dim_});
    for (auto& v : eta.data()) v = rng.normal();
    return fn_(tape, x, eta);
}

}  // namespace cdm
