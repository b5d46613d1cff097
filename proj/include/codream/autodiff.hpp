#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "codream/tensor.hpp"

namespace codream {

using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

enum class OpTag : std::uint8_t {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    exp,
    log,
    relu,
    sqrt,
    square,
    log_softmax,
    logaddexp,
    sum,
    mean,
    add_row,
    sub_row,
    mul_row,
    div_row,
    l2_norm,
};

const char* op_name(OpTag tag);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    NodeId id = kNoNode;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

using GradientMap = std::unordered_map<NodeId, Tensor>;

// Append-only computation record. Parents always precede children, so the
// append index is a topological order. Single-threaded; one tape per worker.
class Tape {
   public:
    struct Node {
        OpTag op = OpTag::leaf;
        NodeId lhs = kNoNode;
        NodeId rhs = kNoNode;
        Tensor value;
        double scalar = 0.0;  // scale factor / additive constant
        int axis = -1;        // reduction axis, -1 = all
    };

    Var leaf(Tensor value);
    Var constant(Tensor value) { return leaf(std::move(value)); }

    const Tensor& value(Var v) const;
    const Node& node(NodeId id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }

    // Exact reverse-mode gradients of a scalar node. Leaves that the loss
    // does not depend on receive zeros.
    GradientMap backward(Var loss, std::span<const Var> leaves) const;
    Tensor gradient(Var loss, Var leaf) const;

    // Activation pattern of every non-smooth primitive (relu sign, norm at
    // zero). Two tapes built by the same function share a signature iff
    // they sit in the same smooth piece.
    std::vector<std::uint8_t> kink_signature() const;

    Var push(OpTag op, Tensor value, NodeId lhs, NodeId rhs = kNoNode, double scalar = 0.0, int axis = -1);

   private:
    std::vector<Node> nodes_;
};

// Differentiable primitives. Binary elementwise ops accept equal shapes or
// a rank-0 scalar on either side; nothing else broadcasts.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var sqrt(Var a);
Var square(Var a);
Var log_softmax(Var logits);
Var softmax(Var logits);
Var logaddexp(Var a, Var b);
Var sum(Var a, std::optional<int> axis = std::nullopt);
Var mean(Var a, std::optional<int> axis = std::nullopt);
// Row-vector ops: a is m x n, b is 1 x n, b is applied to every row.
Var add_row(Var a, Var b);
Var sub_row(Var a, Var b);
Var mul_row(Var a, Var b);
Var div_row(Var a, Var b);
Var l2_norm(Var a);

enum class Elementwise { add, sub, mul, scale, exp, log, relu };
enum class Reduce { sum, mean };

// Tag-dispatched forms. `other` is the second operand for binary tags,
// `factor` the constant for `scale`.
Var elementwise(Elementwise tag, Var a, std::optional<Var> other = std::nullopt, double factor = 1.0);
Var reduce(Reduce tag, Var a, std::optional<int> axis = std::nullopt);

using ScalarFn = std::function<Var(Tape&, Var)>;

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

// Compares reverse-mode gradient of f at x against central differences.
// Per coordinate: |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8). Coordinates
// whose stencil crosses a relu kink are not differentiable there and are
// skipped (counted in skipped_kinks).
FdReport finite_difference_check(const ScalarFn& f, const Tensor& x, double epsilon = 1e-5);

}  // namespace codream
