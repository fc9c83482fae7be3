#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm {

class Tape;

// Lightweight handle to a node on a tape. Vars are only valid while their
// tape is alive and not reset.
struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const std::vector<int64_t>& shape() const { return value().shape(); }
};

enum class OpKind : uint8_t {
    leaf,
    constant,
    add,
    sub,
    mul,
    div,
    matmul,
    transpose,
    sum,
    mean,
    exp,
    log,
    sqrt,
    square,
    neg,
    relu,
    silu,
    tanh,
    sin,
    cos,
    abs,
    broadcast,
    concat,
    index_select,
    clamp_min,
    scale,
    add_scalar,
    sort,
};

const char* op_name(OpKind op);

// Append-only record of forward operations. Nodes are topologically ordered
// by construction; leaves and constants are recorded but do not count as
// forward ops (node_count / depth track ops only, which is the proxy used by
// the memory experiments).
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value);
    Var constant_scalar(double v);

    // elementwise, shapes must match exactly
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);

    Var matmul(Var a, Var b);
    Var transpose(Var a);

    Var sum(Var a);
    Var mean(Var a);

    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);
    Var square(Var a);
    Var neg(Var a);
    Var relu(Var a);
    Var silu(Var a);
    Var tanh(Var a);
    Var sin(Var a);
    Var cos(Var a);
    Var abs(Var a);

    Var broadcast(Var a, std::vector<int64_t> target_shape);
    Var concat(const std::vector<Var>& parts, int64_t axis);
    Var index_select(Var a, int64_t axis, std::vector<int64_t> indices);
    Var clamp_min(Var a, double floor);
    Var scale(Var a, double s);        // s * a, s is a plain constant
    Var add_scalar(Var a, double c);   // a + c

    // Stable ascending sort of a 1-D tensor. The recorded permutation routes
    // gradients back through the inverse permutation (sorting is
    // piecewise-linear in its input).
    std::pair<Var, std::vector<int64_t>> sort_with_gradient(Var a);

    // Reverse-mode sweep from a scalar root. The tape is consumed unless
    // retain is set; leaf gradients are read back with grad().
    void backward(Var root, bool retain = false);
    Tensor grad(Var v) const;

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;

    // node_count counts recorded forward ops; depth is the longest op chain.
    int64_t node_count() const { return op_count_; }
    int64_t depth() const;
    std::pair<int64_t, int64_t> depth_and_node_count() const;
    // total doubles held as saved forward values of op nodes
    int64_t stored_value_scalars() const { return stored_scalars_; }

    void reset();

private:
    struct Node {
        OpKind op;
        Tensor value;
        std::vector<int32_t> args;
        std::vector<int64_t> iaux;  // permutation / indices / split offsets / source shape
        int64_t axis = 0;
        double daux = 0.0;
        bool requires_grad = false;
    };

    Var record(OpKind op, Tensor value, std::vector<int32_t> args, std::vector<int64_t> iaux = {},
               int64_t axis = 0, double daux = 0.0);
    const Node& node(Var v) const;
    Var unary(OpKind op, Var a);
    void check_same_tape(Var v) const;
    void check_finite(const Tensor& t, OpKind op) const;
    void backward_node(int32_t id, std::vector<Tensor>& grads);
    void accumulate(std::vector<Tensor>& grads, int32_t id, const Tensor& g);

    std::vector<Node> nodes_;
    std::vector<Tensor> last_grads_;
    int64_t op_count_ = 0;
    int64_t stored_scalars_ = 0;
    bool consumed_ = false;
};

}  // namespace cdm
