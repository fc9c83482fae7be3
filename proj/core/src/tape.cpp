#include "cdm/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cdm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_matrix(const Tensor& t) {
    if (t.rank() != 2) throw std::invalid_argument("matmul operand must be rank-2, got " + t.shape_str());
    return ConstMapMat(t.data().data(), t.shape()[0], t.shape()[1]);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool is_scalar_like(const std::vector<int64_t>& s) {
    return shape_numel(s) == 1;
}

}  // namespace

const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::leaf: return "leaf";
        case OpKind::constant: return "constant";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::div: return "div";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::sqrt: return "sqrt";
        case OpKind::square: return "square";
        case OpKind::neg: return "neg";
        case OpKind::relu: return "relu";
        case OpKind::silu: return "silu";
        case OpKind::tanh: return "tanh";
        case OpKind::sin: return "sin";
        case OpKind::cos: return "cos";
        case OpKind::abs: return "abs";
        case OpKind::broadcast: return "broadcast";
        case OpKind::concat: return "concat";
        case OpKind::index_select: return "index_select";
        case OpKind::clamp_min: return "clamp_min";
        case OpKind::scale: return "scale";
        case OpKind::add_scalar: return "add_scalar";
        case OpKind::sort: return "sort";
    }
    return "?";
}

const Tensor& Var::value() const {
    if (!valid()) throw std::logic_error("Var::value on invalid handle");
    return tape->value(*this);
}

void Tape::check_same_tape(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int32_t>(nodes_.size()))
        throw std::logic_error("Var does not belong to this tape");
}

void Tape::check_finite(const Tensor& t, OpKind op) const {
    if (!t.all_finite())
        throw std::domain_error(std::string("non-finite value produced by op '") + op_name(op) + "'");
}

Var Tape::record(OpKind op, Tensor value, std::vector<int32_t> args, std::vector<int64_t> iaux,
                 int64_t axis, double daux) {
    const bool is_source = (op == OpKind::leaf || op == OpKind::constant);
    if (!is_source) check_finite(value, op);
    Node n;
    n.op = op;
    n.args = std::move(args);
    n.iaux = std::move(iaux);
    n.axis = axis;
    n.daux = daux;
    n.requires_grad = false;
    for (int32_t a : n.args) n.requires_grad = n.requires_grad || nodes_[a].requires_grad;
    if (!is_source) {
        ++op_count_;
        stored_scalars_ += value.size();
    }
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
    check_same_tape(v);
    return nodes_[v.id];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Var v = record(OpKind::leaf, std::move(value), {});
    nodes_[v.id].requires_grad = requires_grad;
    return v;
}

Var Tape::constant(Tensor value) { return record(OpKind::constant, std::move(value), {}); }

Var Tape::constant_scalar(double v) { return constant(Tensor::scalar(v)); }

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch between " + a.shape_str() + " and " +
                                    b.shape_str());
}
}  // namespace

Var Tape::add(Var a, Var b) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require_same_shape(ta, tb, "add");
    Tensor out(ta.shape(), ta.data());
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] += tb.data()[i];
    return record(OpKind::add, std::move(out), {a.id, b.id});
}

Var Tape::sub(Var a, Var b) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require_same_shape(ta, tb, "sub");
    Tensor out(ta.shape(), ta.data());
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] -= tb.data()[i];
    return record(OpKind::sub, std::move(out), {a.id, b.id});
}

Var Tape::mul(Var a, Var b) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require_same_shape(ta, tb, "mul");
    Tensor out(ta.shape(), ta.data());
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] *= tb.data()[i];
    return record(OpKind::mul, std::move(out), {a.id, b.id});
}

Var Tape::div(Var a, Var b) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require_same_shape(ta, tb, "div");
    Tensor out(ta.shape(), ta.data());
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] /= tb.data()[i];
    return record(OpKind::div, std::move(out), {a.id, b.id});
}

Var Tape::matmul(Var a, Var b) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + ta.shape_str() + " x " + tb.shape_str());
    Tensor out = Tensor::zeros({ta.shape()[0], tb.shape()[1]});
    MapMat(out.data().data(), out.shape()[0], out.shape()[1]) = as_matrix(ta) * as_matrix(tb);
    return record(OpKind::matmul, std::move(out), {a.id, b.id});
}

Var Tape::transpose(Var a) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    if (ta.rank() != 2) throw std::invalid_argument("transpose: rank-2 required, got " + ta.shape_str());
    Tensor out = Tensor::zeros({ta.shape()[1], ta.shape()[0]});
    MapMat(out.data().data(), out.shape()[0], out.shape()[1]) = as_matrix(ta).transpose();
    return record(OpKind::transpose, std::move(out), {a.id});
}

Var Tape::sum(Var a) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    double s = std::accumulate(ta.data().begin(), ta.data().end(), 0.0);
    return record(OpKind::sum, Tensor::scalar(s), {a.id});
}

Var Tape::mean(Var a) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    if (ta.size() == 0) throw std::invalid_argument("mean: empty tensor");
    double s = std::accumulate(ta.data().begin(), ta.data().end(), 0.0);
    return record(OpKind::mean, Tensor::scalar(s / static_cast<double>(ta.size())), {a.id});
}

Var Tape::unary(OpKind op, Var a) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    Tensor out(ta.shape(), ta.data());
    auto& d = out.data();
    switch (op) {
        case OpKind::exp:
            for (auto& v : d) v = std::exp(v);
            break;
        case OpKind::log:
            for (auto& v : d) v = std::log(v);
            break;
        case OpKind::sqrt:
            for (auto& v : d) v = std::sqrt(v);
            break;
        case OpKind::square:
            for (auto& v : d) v = v * v;
            break;
        case OpKind::neg:
            for (auto& v : d) v = -v;
            break;
        case OpKind::relu:
            for (auto& v : d) v = v > 0.0 ? v : 0.0;
            break;
        case OpKind::silu:
            for (auto& v : d) v = v * sigmoid(v);
            break;
        case OpKind::tanh:
            for (auto& v : d) v = std::tanh(v);
            break;
        case OpKind::sin:
            for (auto& v : d) v = std::sin(v);
            break;
        case OpKind::cos:
            for (auto& v : d) v = std::cos(v);
            break;
        case OpKind::abs:
            for (auto& v : d) v = std::fabs(v);
            break;
        default:
            throw std::logic_error("unary: bad op");
    }
    return record(op, std::move(out), {a.id});
}

Var Tape::exp(Var a) { return unary(OpKind::exp, a); }
Var Tape::log(Var a) { return unary(OpKind::log, a); }
Var Tape::sqrt(Var a) { return unary(OpKind::sqrt, a); }
Var Tape::square(Var a) { return unary(OpKind::square, a); }
Var Tape::neg(Var a) { return unary(OpKind::neg, a); }
Var Tape::relu(Var a) { return unary(OpKind::relu, a); }
Var Tape::silu(Var a) { return unary(OpKind::silu, a); }
Var Tape::tanh(Var a) { return unary(OpKind::tanh, a); }
Var Tape::sin(Var a) { return unary(OpKind::sin, a); }
Var Tape::cos(Var a) { return unary(OpKind::cos, a); }
Var Tape::abs(Var a) { return unary(OpKind::abs, a); }

Var Tape::broadcast(Var a, std::vector<int64_t> target_shape) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    const auto& src = ta.shape();
    if (src == target_shape) {
        return record(OpKind::broadcast, Tensor(target_shape, ta.data()), {a.id},
                      std::vector<int64_t>(src.begin(), src.end()));
    }
    if (target_shape.size() != 2)
        throw std::invalid_argument("broadcast: target must be rank-2 or equal to source, got " +
                                    shape_to_string(target_shape));
    const int64_t R = target_shape[0], C = target_shape[1];
    Tensor out = Tensor::zeros({R, C});
    if (is_scalar_like(src)) {
        std::fill(out.data().begin(), out.data().end(), ta.data()[0]);
    } else if (src.size() == 2 && src[0] == R && src[1] == 1) {
        for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < C; ++c) out.at(r, c) = ta.data()[static_cast<size_t>(r)];
    } else if ((src.size() == 2 && src[0] == 1 && src[1] == C) || (src.size() == 1 && src[0] == C)) {
        for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < C; ++c) out.at(r, c) = ta.data()[static_cast<size_t>(c)];
    } else {
        throw std::invalid_argument("broadcast: cannot expand " + ta.shape_str() + " to " +
                                    shape_to_string(target_shape));
    }
    return record(OpKind::broadcast, std::move(out), {a.id}, std::vector<int64_t>(src.begin(), src.end()));
}

Var Tape::concat(const std::vector<Var>& parts, int64_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no operands");
    std::vector<int32_t> args;
    args.reserve(parts.size());
    for (Var p : parts) {
        check_same_tape(p);
        args.push_back(p.id);
    }
    // scalars and rank-1 tensors concatenate into a rank-1 vector
    bool all_flat = true;
    for (int32_t id : args) all_flat = all_flat && nodes_[id].value.rank() <= 1;
    std::vector<int64_t> offsets{0};
    if (all_flat && axis == 0) {
        std::vector<double> data;
        for (int32_t id : args) {
            const auto& v = nodes_[id].value.data();
            data.insert(data.end(), v.begin(), v.end());
            offsets.push_back(static_cast<int64_t>(data.size()));
        }
        return record(OpKind::concat, Tensor::vector(std::move(data)), std::move(args), std::move(offsets), axis);
    }
    // rank-2 along rows (axis 0) or columns (axis 1)
    const Tensor& first = nodes_[args[0]].value;
    if (first.rank() != 2) throw std::invalid_argument("concat: rank-2 required, got " + first.shape_str());
    if (axis == 0) {
        const int64_t C = first.shape()[1];
        std::vector<double> data;
        int64_t rows = 0;
        for (int32_t id : args) {
            const Tensor& t = nodes_[id].value;
            if (t.rank() != 2 || t.shape()[1] != C)
                throw std::invalid_argument("concat: shape mismatch between " + first.shape_str() + " and " +
                                            t.shape_str());
            data.insert(data.end(), t.data().begin(), t.data().end());
            rows += t.shape()[0];
            offsets.push_back(rows);
        }
        return record(OpKind::concat, Tensor({rows, C}, std::move(data)), std::move(args), std::move(offsets),
                      axis);
    }
    if (axis == 1) {
        const int64_t R = first.shape()[0];
        int64_t cols = 0;
        for (int32_t id : args) {
            const Tensor& t = nodes_[id].value;
            if (t.rank() != 2 || t.shape()[0] != R)
                throw std::invalid_argument("concat: shape mismatch between " + first.shape_str() + " and " +
                                            t.shape_str());
            cols += t.shape()[1];
            offsets.push_back(cols);
        }
        Tensor out = Tensor::zeros({R, cols});
        int64_t c0 = 0;
        for (int32_t id : args) {
            const Tensor& t = nodes_[id].value;
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < t.shape()[1]; ++c) out.at(r, c0 + c) = t.at(r, c);
            c0 += t.shape()[1];
        }
        return record(OpKind::concat, std::move(out), std::move(args), std::move(offsets), axis);
    }
    throw std::invalid_argument("concat: axis must be 0 or 1");
}

Var Tape::index_select(Var a, int64_t axis, std::vector<int64_t> indices) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    if (indices.empty()) throw std::invalid_argument("index_select: empty index list");
    if (ta.rank() == 1) {
        if (axis != 0) throw std::invalid_argument("index_select: axis out of range for rank-1");
        std::vector<double> data;
        data.reserve(indices.size());
        for (int64_t i : indices) {
            if (i < 0 || i >= ta.shape()[0]) throw std::out_of_range("index_select: index out of range");
            data.push_back(ta.data()[static_cast<size_t>(i)]);
        }
        return record(OpKind::index_select, Tensor::vector(std::move(data)), {a.id}, std::move(indices), axis);
    }
    if (ta.rank() != 2) throw std::invalid_argument("index_select: rank-1 or rank-2 required");
    if (axis == 0) {
        const int64_t C = ta.shape()[1];
        Tensor out = Tensor::zeros({static_cast<int64_t>(indices.size()), C});
        for (size_t k = 0; k < indices.size(); ++k) {
            int64_t i = indices[k];
            if (i < 0 || i >= ta.shape()[0]) throw std::out_of_range("index_select: index out of range");
            for (int64_t c = 0; c < C; ++c) out.at(static_cast<int64_t>(k), c) = ta.at(i, c);
        }
        return record(OpKind::index_select, std::move(out), {a.id}, std::move(indices), axis);
    }
    if (axis == 1) {
        const int64_t R = ta.shape()[0];
        Tensor out = Tensor::zeros({R, static_cast<int64_t>(indices.size())});
        for (size_t k = 0; k < indices.size(); ++k) {
            int64_t c = indices[k];
            if (c < 0 || c >= ta.shape()[1]) throw std::out_of_range("index_select: index out of range");
            for (int64_t r = 0; r < R; ++r) out.at(r, static_cast<int64_t>(k)) = ta.at(r, c);
        }
        return record(OpKind::index_select, std::move(out), {a.id}, std::move(indices), axis);
    }
    throw std::invalid_argument("index_select: axis must be 0 or 1");
}

Var Tape::clamp_min(Var a, double floor) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    Tensor out(ta.shape(), ta.data());
    for (auto& v : out.data()) v = std::max(v, floor);
    return record(OpKind::clamp_min, std::move(out), {a.id}, {}, 0, floor);
}

Var Tape::scale(Var a, double s) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    Tensor out(ta.shape(), ta.data());
    for (auto& v : out.data()) v *= s;
    return record(OpKind::scale, std::move(out), {a.id}, {}, 0, s);
}

Var Tape::add_scalar(Var a, double c) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    Tensor out(ta.shape(), ta.data());
    for (auto& v : out.data()) v += c;
    return record(OpKind::add_scalar, std::move(out), {a.id}, {}, 0, c);
}

std::pair<Var, std::vector<int64_t>> Tape::sort_with_gradient(Var a) {
    check_same_tape(a);
    const Tensor& ta = nodes_[a.id].value;
    if (ta.rank() != 1 && !(ta.rank() == 2 && (ta.shape()[0] == 1 || ta.shape()[1] == 1)))
        throw std::invalid_argument("sort_with_gradient: 1-D tensor required, got " + ta.shape_str());
    if (!ta.all_finite()) throw std::domain_error("sort_with_gradient: non-finite input");
    const auto& src = ta.data();
    std::vector<int64_t> perm(src.size());
    std::iota(perm.begin(), perm.end(), 0);
    // stable: ties keep original index order so the gradient routing is
    // deterministic
    std::stable_sort(perm.begin(), perm.end(),
                     [&](int64_t i, int64_t j) { return src[static_cast<size_t>(i)] < src[static_cast<size_t>(j)]; });
    std::vector<double> sorted(src.size());
    for (size_t i = 0; i < perm.size(); ++i) sorted[i] = src[static_cast<size_t>(perm[i])];
    Var out = record(OpKind::sort, Tensor(ta.shape(), std::move(sorted)), {a.id},
                     std::vector<int64_t>(perm.begin(), perm.end()));
    return {out, perm};
}

int64_t Tape::depth() const { return depth_and_node_count().first; }

std::pair<int64_t, int64_t> Tape::depth_and_node_count() const {
    std::vector<int64_t> depth(nodes_.size(), 0);
    int64_t best = 0;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.op == OpKind::leaf || n.op == OpKind::constant) continue;
        int64_t d = 0;
        for (int32_t a : n.args) d = std::max(d, depth[static_cast<size_t>(a)]);
        depth[i] = d + 1;
        best = std::max(best, depth[i]);
    }
    return {best, op_count_};
}

void Tape::reset() {
    nodes_.clear();
    last_grads_.clear();
    op_count_ = 0;
    stored_scalars_ = 0;
    consumed_ = false;
}

void Tape::accumulate(std::vector<Tensor>& grads, int32_t id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor& slot = grads[static_cast<size_t>(id)];
    if (slot.size() == 0) {
        slot = g;
        return;
    }
    for (int64_t i = 0; i < slot.size(); ++i) slot.data()[i] += g.data()[i];
}

void Tape::backward(Var root, bool retain) {
    check_same_tape(root);
    if (consumed_) throw std::logic_error("backward on a consumed tape (use retain to reuse)");
    const Tensor& rv = nodes_[root.id].value;
    if (rv.size() != 1) throw std::invalid_argument("backward: root must be scalar, got " + rv.shape_str());
    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<size_t>(root.id)] = Tensor(rv.shape(), {1.0});
    for (int32_t i = root.id; i >= 0; --i) {
        const Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad) continue;
        if (grads[static_cast<size_t>(i)].size() == 0) continue;
        if (n.op == OpKind::leaf || n.op == OpKind::constant) continue;
        backward_node(i, grads);
        if (i != root.id || !retain) grads[static_cast<size_t>(i)] = Tensor();  // free intermediate
    }
    last_grads_ = std::move(grads);
    if (!retain) consumed_ = true;
}

void Tape::backward_node(int32_t id, std::vector<Tensor>& grads) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& g = grads[static_cast<size_t>(id)];
    auto arg_val = [&](size_t k) -> const Tensor& { return nodes_[static_cast<size_t>(n.args[k])].value; };
    switch (n.op) {
        case OpKind::add: {
            accumulate(grads, n.args[0], g);
            accumulate(grads, n.args[1], g);
            break;
        }
        case OpKind::sub: {
            accumulate(grads, n.args[0], g);
            Tensor gb(g.shape(), g.data());
            for (auto& v : gb.data()) v = -v;
            accumulate(grads, n.args[1], gb);
            break;
        }
        case OpKind::mul: {
            const Tensor& a = arg_val(0);
            const Tensor& b = arg_val(1);
            Tensor ga(g.shape(), g.data());
            Tensor gb(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) {
                ga.data()[i] *= b.data()[i];
                gb.data()[i] *= a.data()[i];
            }
            accumulate(grads, n.args[0], ga);
            accumulate(grads, n.args[1], gb);
            break;
        }
        case OpKind::div: {
            const Tensor& a = arg_val(0);
            const Tensor& b = arg_val(1);
            Tensor ga(g.shape(), g.data());
            Tensor gb(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) {
                const double bi = b.data()[i];
                ga.data()[i] /= bi;
                gb.data()[i] *= -a.data()[i] / (bi * bi);
            }
            accumulate(grads, n.args[0], ga);
            accumulate(grads, n.args[1], gb);
            break;
        }
        case OpKind::matmul: {
            const Tensor& a = arg_val(0);
            const Tensor& b = arg_val(1);
            if (nodes_[n.args[0]].requires_grad) {
                Tensor ga = Tensor::zeros(a.shape());
                MapMat(ga.data().data(), a.shape()[0], a.shape()[1]) = as_matrix(g) * as_matrix(b).transpose();
                accumulate(grads, n.args[0], ga);
            }
            if (nodes_[n.args[1]].requires_grad) {
                Tensor gb = Tensor::zeros(b.shape());
                MapMat(gb.data().data(), b.shape()[0], b.shape()[1]) = as_matrix(a).transpose() * as_matrix(g);
                accumulate(grads, n.args[1], gb);
            }
            break;
        }
        case OpKind::transpose: {
            const Tensor& a = arg_val(0);
            Tensor ga = Tensor::zeros(a.shape());
            MapMat(ga.data().data(), a.shape()[0], a.shape()[1]) = as_matrix(g).transpose();
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::sum: {
            const Tensor& a = arg_val(0);
            accumulate(grads, n.args[0], Tensor::full(a.shape(), g.item()));
            break;
        }
        case OpKind::mean: {
            const Tensor& a = arg_val(0);
            accumulate(grads, n.args[0], Tensor::full(a.shape(), g.item() / static_cast<double>(a.size())));
            break;
        }
        case OpKind::exp: {
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= n.value.data()[i];
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::log: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] /= a.data()[i];
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::sqrt: {
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= 0.5 / n.value.data()[i];
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::square: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= 2.0 * a.data()[i];
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::neg: {
            Tensor ga(g.shape(), g.data());
            for (auto& v : ga.data()) v = -v;
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::relu: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= a.data()[i] > 0.0 ? 1.0 : 0.0;
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::silu: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) {
                const double s = sigmoid(a.data()[i]);
                ga.data()[i] *= s * (1.0 + a.data()[i] * (1.0 - s));
            }
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::tanh: {
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) {
                const double t = n.value.data()[i];
                ga.data()[i] *= 1.0 - t * t;
            }
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::sin: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= std::cos(a.data()[i]);
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::cos: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= -std::sin(a.data()[i]);
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::abs: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) {
                const double x = a.data()[i];
                ga.data()[i] *= x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            }
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::broadcast: {
            std::vector<int64_t> src(n.iaux.begin(), n.iaux.end());
            Tensor ga = Tensor::zeros(src);
            if (src == g.shape()) {
                ga = g;
            } else if (is_scalar_like(src)) {
                double s = std::accumulate(g.data().begin(), g.data().end(), 0.0);
                ga.data()[0] = s;
            } else if (src.size() == 2 && src[1] == 1) {
                for (int64_t r = 0; r < g.shape()[0]; ++r)
                    for (int64_t c = 0; c < g.shape()[1]; ++c) ga.data()[static_cast<size_t>(r)] += g.at(r, c);
            } else {  // row-like source [1,m] or [m]
                for (int64_t r = 0; r < g.shape()[0]; ++r)
                    for (int64_t c = 0; c < g.shape()[1]; ++c) ga.data()[static_cast<size_t>(c)] += g.at(r, c);
            }
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::concat: {
            const auto& offsets = n.iaux;
            if (n.value.rank() <= 1 || n.axis == 0) {
                // flat offsets are element offsets, axis-0 offsets are row offsets
                const int64_t C = n.value.rank() == 2 ? n.value.shape()[1] : 1;
                for (size_t k = 0; k < n.args.size(); ++k) {
                    if (!nodes_[n.args[k]].requires_grad) continue;
                    const Tensor& part = nodes_[n.args[k]].value;
                    Tensor gp = Tensor::zeros(part.shape());
                    const int64_t base = offsets[k] * C;
                    const int64_t count = (offsets[k + 1] - offsets[k]) * C;
                    for (int64_t i = 0; i < count; ++i)
                        gp.data()[static_cast<size_t>(i)] = g.data()[static_cast<size_t>(base + i)];
                    accumulate(grads, n.args[k], gp);
                }
            } else {  // axis == 1
                const int64_t R = n.value.shape()[0];
                for (size_t k = 0; k < n.args.size(); ++k) {
                    if (!nodes_[n.args[k]].requires_grad) continue;
                    const Tensor& part = nodes_[n.args[k]].value;
                    Tensor gp = Tensor::zeros(part.shape());
                    for (int64_t r = 0; r < R; ++r)
                        for (int64_t c = offsets[k]; c < offsets[k + 1]; ++c)
                            gp.at(r, c - offsets[k]) = g.at(r, c);
                    accumulate(grads, n.args[k], gp);
                }
            }
            break;
        }
        case OpKind::index_select: {
            const Tensor& a = arg_val(0);
            Tensor ga = Tensor::zeros(a.shape());
            if (a.rank() == 1) {
                for (size_t k = 0; k < n.iaux.size(); ++k)
                    ga.data()[static_cast<size_t>(n.iaux[k])] += g.data()[k];
            } else if (n.axis == 0) {
                const int64_t C = a.shape()[1];
                for (size_t k = 0; k < n.iaux.size(); ++k)
                    for (int64_t c = 0; c < C; ++c) ga.at(n.iaux[k], c) += g.at(static_cast<int64_t>(k), c);
            } else {
                const int64_t R = a.shape()[0];
                for (size_t k = 0; k < n.iaux.size(); ++k)
                    for (int64_t r = 0; r < R; ++r) ga.at(r, n.iaux[k]) += g.at(r, static_cast<int64_t>(k));
            }
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::clamp_min: {
            const Tensor& a = arg_val(0);
            Tensor ga(g.shape(), g.data());
            for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] *= a.data()[i] > n.daux ? 1.0 : 0.0;
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::scale: {
            Tensor ga(g.shape(), g.data());
            for (auto& v : ga.data()) v *= n.daux;
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::add_scalar: {
            accumulate(grads, n.args[0], g);
            break;
        }
        case OpKind::sort: {
            // scatter through the inverse permutation
            const Tensor& a = arg_val(0);
            Tensor ga = Tensor::zeros(a.shape());
            for (size_t i = 0; i < n.iaux.size(); ++i)
                ga.data()[static_cast<size_t>(n.iaux[i])] = g.data()[i];
            accumulate(grads, n.args[0], ga);
            break;
        }
        case OpKind::leaf:
        case OpKind::constant:
            break;
    }
}

Tensor Tape::grad(Var v) const {
    check_same_tape(v);
    if (last_grads_.empty()) throw std::logic_error("grad: no backward pass has run");
    const Tensor& g = last_grads_[static_cast<size_t>(v.id)];
    if (g.size() == 0) return Tensor::zeros(nodes_[static_cast<size_t>(v.id)].value.shape());
    return g;
}

}  // namespace cdm
