#include "codream/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace codream {

const char* op_name(OpTag tag) {
    switch (tag) {
        case OpTag::leaf: return "leaf";
        case OpTag::matmul: return "matmul";
        case OpTag::add: return "add";
        case OpTag::sub: return "sub";
        case OpTag::mul: return "mul";
        case OpTag::scale: return "scale";
        case OpTag::add_scalar: return "add_scalar";
        case OpTag::exp: return "exp";
        case OpTag::log: return "log";
        case OpTag::relu: return "relu";
        case OpTag::sqrt: return "sqrt";
        case OpTag::square: return "square";
        case OpTag::log_softmax: return "log_softmax";
        case OpTag::logaddexp: return "logaddexp";
        case OpTag::sum: return "sum";
        case OpTag::mean: return "mean";
        case OpTag::add_row: return "add_row";
        case OpTag::sub_row: return "sub_row";
        case OpTag::mul_row: return "mul_row";
        case OpTag::div_row: return "div_row";
        case OpTag::l2_norm: return "l2_norm";
    }
    return "?";
}

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Tensor value) { return push(OpTag::leaf, std::move(value), kNoNode); }

const Tensor& Tape::value(Var v) const {
    if (v.tape != this) throw ContractError("variable belongs to a different tape");
    return nodes_.at(v.id).value;
}

Var Tape::push(OpTag op, Tensor value, NodeId lhs, NodeId rhs, double scalar, int axis) {
#ifndef NDEBUG
    if (!value.all_finite()) {
        throw NumericError(std::string("non-finite output from ") + op_name(op) + " at node " +
                           std::to_string(nodes_.size()));
    }
#endif
    nodes_.push_back(Node{op, lhs, rhs, std::move(value), scalar, axis});
    return Var{this, nodes_.size() - 1};
}

namespace {

Tape& tape_of(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
    return *a.tape;
}

Tape& tape_of(Var a) {
    if (a.tape == nullptr) throw ContractError("operand is not bound to a tape");
    return *a.tape;
}

enum class Broadcast { none, lhs_scalar, rhs_scalar };

Broadcast binary_layout(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() == b.shape()) return Broadcast::none;
    if (a.is_scalar()) return Broadcast::lhs_scalar;
    if (b.is_scalar()) return Broadcast::rhs_scalar;
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <typename F>
Var binary(OpTag tag, Var a, Var b, const char* what, F f) {
    Tape& t = tape_of(a, b);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    auto layout = binary_layout(x, y, what);
    const Shape& shape = layout == Broadcast::lhs_scalar ? y.shape() : x.shape();
    std::size_t n = shape_size(shape);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double xi = layout == Broadcast::lhs_scalar ? x[0] : x[i];
        double yi = layout == Broadcast::rhs_scalar ? y[0] : y[i];
        out[i] = f(xi, yi);
    }
    return t.push(tag, Tensor::unchecked(shape, std::move(out)), a.id, b.id);
}

template <typename F>
Var unary(OpTag tag, Var a, F f, double scalar = 0.0) {
    Tape& t = tape_of(a);
    const Tensor& x = t.value(a);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return t.push(tag, Tensor::unchecked(x.shape(), std::move(out)), a.id, kNoNode, scalar);
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

void require_row_operand(const Tensor& a, const Tensor& b, const char* what) {
    require_matrix(a, what);
    if (b.rank() != 2 || b.rows() != 1 || b.cols() != a.cols()) {
        throw DimensionError(std::string(what) + ": row operand " + shape_string(b.shape()) + " does not fit " +
                             shape_string(a.shape()));
    }
}

template <typename F>
Var row_op(OpTag tag, Var a, Var b, const char* what, F f) {
    Tape& t = tape_of(a, b);
    const Tensor& x = t.value(a);
    const Tensor& r = t.value(b);
    require_row_operand(x, r, what);
    std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = f(x[i * n + j], r[j]);
    return t.push(tag, Tensor::unchecked(x.shape(), std::move(out)), a.id, b.id);
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
        throw DimensionError("matmul: incompatible shapes " + shape_string(x.shape()) + " and " +
                             shape_string(y.shape()));
    }
    std::size_t m = x.rows(), k = x.cols(), n = y.cols();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double xv = x[i * k + p];
            const double* yr = &y.data()[p * n];
            double* o = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) o[j] += xv * yr[j];
        }
    return t.push(OpTag::matmul, Tensor::unchecked({m, n}, std::move(out)), a.id, b.id);
}

Var add(Var a, Var b) {
    return binary(OpTag::add, a, b, "add", [](double x, double y) { return x + y; });
}
Var sub(Var a, Var b) {
    return binary(OpTag::sub, a, b, "sub", [](double x, double y) { return x - y; });
}
Var mul(Var a, Var b) {
    return binary(OpTag::mul, a, b, "mul", [](double x, double y) { return x * y; });
}
Var scale(Var a, double s) {
    return unary(OpTag::scale, a, [s](double x) { return s * x; }, s);
}
Var add_scalar(Var a, double s) {
    return unary(OpTag::add_scalar, a, [s](double x) { return x + s; }, s);
}
Var exp(Var a) {
    return unary(OpTag::exp, a, [](double x) { return std::exp(x); });
}
Var log(Var a) {
    const Tensor& x = tape_of(a).value(a);
    for (double v : x.data()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    }
    return unary(OpTag::log, a, [](double x) { return std::log(x); });
}
Var relu(Var a) {
    return unary(OpTag::relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}
Var sqrt(Var a) {
    const Tensor& x = tape_of(a).value(a);
    for (double v : x.data()) {
        if (!(v > 0.0)) throw DomainError("sqrt of non-positive value " + std::to_string(v));
    }
    return unary(OpTag::sqrt, a, [](double x) { return std::sqrt(x); });
}
Var square(Var a) {
    return unary(OpTag::square, a, [](double x) { return x * x; });
}

Var log_softmax(Var logits) {
    Tape& t = tape_of(logits);
    const Tensor& x = t.value(logits);
    require_matrix(x, "log_softmax");
    std::size_t m = x.rows(), c = x.cols();
    if (c < 2) throw DimensionError("log_softmax needs at least 2 classes, got " + shape_string(x.shape()));
    std::vector<double> out(m * c);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &x.data()[i * c];
        double mx = *std::max_element(row, row + c);
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - mx);
        double lse = mx + std::log(acc);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
    }
    return t.push(OpTag::log_softmax, Tensor::unchecked(x.shape(), std::move(out)), logits.id);
}

Var softmax(Var logits) { return exp(log_softmax(logits)); }

Var logaddexp(Var a, Var b) {
    return binary(OpTag::logaddexp, a, b, "logaddexp", [](double x, double y) {
        double mx = std::max(x, y);
        return mx + std::log(std::exp(x - mx) + std::exp(y - mx));
    });
}

namespace {

Var reduce_impl(OpTag tag, Var a, std::optional<int> axis) {
    Tape& t = tape_of(a);
    const Tensor& x = t.value(a);
    double div = 1.0;
    if (!axis) {
        double acc = 0.0;
        for (double v : x.data()) acc += v;
        if (tag == OpTag::mean) div = static_cast<double>(x.size());
        return t.push(tag, Tensor::unchecked({}, {acc / div}), a.id, kNoNode, 0.0, -1);
    }
    if (x.rank() != 2 || (*axis != 0 && *axis != 1)) {
        throw DimensionError("reduce: invalid axis " + std::to_string(*axis) + " for shape " +
                             shape_string(x.shape()));
    }
    std::size_t m = x.rows(), n = x.cols();
    if (*axis == 0) {
        std::vector<double> out(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
        if (tag == OpTag::mean)
            for (auto& v : out) v /= static_cast<double>(m);
        return t.push(tag, Tensor::unchecked({1, n}, std::move(out)), a.id, kNoNode, 0.0, 0);
    }
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += x[i * n + j];
    if (tag == OpTag::mean)
        for (auto& v : out) v /= static_cast<double>(n);
    return t.push(tag, Tensor::unchecked({m, 1}, std::move(out)), a.id, kNoNode, 0.0, 1);
}

}  // namespace

Var sum(Var a, std::optional<int> axis) { return reduce_impl(OpTag::sum, a, axis); }
Var mean(Var a, std::optional<int> axis) { return reduce_impl(OpTag::mean, a, axis); }

Var add_row(Var a, Var b) {
    return row_op(OpTag::add_row, a, b, "add_row", [](double x, double r) { return x + r; });
}
Var sub_row(Var a, Var b) {
    return row_op(OpTag::sub_row, a, b, "sub_row", [](double x, double r) { return x - r; });
}
Var mul_row(Var a, Var b) {
    return row_op(OpTag::mul_row, a, b, "mul_row", [](double x, double r) { return x * r; });
}
Var div_row(Var a, Var b) {
    const Tensor& r = tape_of(a, b).value(b);
    for (double v : r.data()) {
        if (v == 0.0) throw DomainError("div_row by zero");
    }
    return row_op(OpTag::div_row, a, b, "div_row", [](double x, double d) { return x / d; });
}

Var l2_norm(Var a) {
    Tape& t = tape_of(a);
    const Tensor& x = t.value(a);
    double acc = 0.0;
    for (double v : x.data()) acc += v * v;
    return t.push(OpTag::l2_norm, Tensor::unchecked({}, {std::sqrt(acc)}), a.id);
}

Var elementwise(Elementwise tag, Var a, std::optional<Var> other, double factor) {
    auto rhs = [&]() {
        if (!other) throw ContractError("binary elementwise op needs a second operand");
        return *other;
    };
    switch (tag) {
        case Elementwise::add: return add(a, rhs());
        case Elementwise::sub: return sub(a, rhs());
        case Elementwise::mul: return mul(a, rhs());
        case Elementwise::scale: return scale(a, factor);
        case Elementwise::exp: return exp(a);
        case Elementwise::log: return log(a);
        case Elementwise::relu: return relu(a);
    }
    throw ContractError("unknown elementwise tag");
}

Var reduce(Reduce tag, Var a, std::optional<int> axis) {
    return tag == Reduce::sum ? sum(a, axis) : mean(a, axis);
}

namespace {

// Accumulate g into slot, reducing to a scalar when the slot is rank-0.
void accumulate(Tensor& slot, const Shape& shape, const std::vector<double>& g) {
    if (slot.size() == 0) slot = Tensor::zeros(shape);
    if (slot.size() == g.size()) {
        for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    } else {
        double acc = 0.0;
        for (double v : g) acc += v;
        slot[0] += acc;
    }
}

}  // namespace

GradientMap Tape::backward(Var loss, std::span<const Var> leaves) const {
    const Tensor& lv = value(loss);
    if (lv.size() != 1) throw ContractError("backward needs a scalar loss, got " + shape_string(lv.shape()));

    std::vector<Tensor> grads(loss.id + 1);
    grads[loss.id] = Tensor::unchecked(lv.shape(), {1.0});

    for (NodeId id = loss.id + 1; id-- > 0;) {
        const Tensor& g = grads[id];
        if (g.size() == 0) continue;
        const Node& nd = nodes_[id];
        const Tensor& out = nd.value;
        const std::size_t n = g.size();
        auto lhs_val = [&]() -> const Tensor& { return nodes_[nd.lhs].value; };
        auto rhs_val = [&]() -> const Tensor& { return nodes_[nd.rhs].value; };
        auto push_lhs = [&](const std::vector<double>& d) { accumulate(grads[nd.lhs], lhs_val().shape(), d); };
        auto push_rhs = [&](const std::vector<double>& d) { accumulate(grads[nd.rhs], rhs_val().shape(), d); };
        // Value of a broadcastable operand at element i.
        auto at = [](const Tensor& t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; };

        switch (nd.op) {
            case OpTag::leaf:
                break;
            case OpTag::matmul: {
                const Tensor& a = lhs_val();
                const Tensor& b = rhs_val();
                std::size_t m = a.rows(), k = a.cols(), c = b.cols();
                std::vector<double> da(m * k, 0.0), db(k * c, 0.0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * b[p * c + j];
                        da[i * k + p] = acc;
                    }
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double av = a[i * k + p];
                        for (std::size_t j = 0; j < c; ++j) db[p * c + j] += av * g[i * c + j];
                    }
                push_lhs(da);
                push_rhs(db);
                break;
            }
            case OpTag::add:
            case OpTag::sub: {
                std::vector<double> d(g.values());
                push_lhs(d);
                if (nd.op == OpTag::sub)
                    for (auto& v : d) v = -v;
                push_rhs(d);
                break;
            }
            case OpTag::mul: {
                const Tensor& a = lhs_val();
                const Tensor& b = rhs_val();
                std::vector<double> da(n), db(n);
                for (std::size_t i = 0; i < n; ++i) {
                    da[i] = g[i] * at(b, i);
                    db[i] = g[i] * at(a, i);
                }
                push_lhs(da);
                push_rhs(db);
                break;
            }
            case OpTag::scale: {
                std::vector<double> d(n);
                for (std::size_t i = 0; i < n; ++i) d[i] = nd.scalar * g[i];
                push_lhs(d);
                break;
            }
            case OpTag::add_scalar:
                push_lhs(g.values());
                break;
            case OpTag::exp: {
                std::vector<double> d(n);
                for (std::size_t i = 0; i < n; ++i) d[i] = g[i] * out[i];
                push_lhs(d);
                break;
            }
            case OpTag::log: {
                const Tensor& a = lhs_val();
                std::vector<double> d(n);
                for (std::size_t i = 0; i < n; ++i) d[i] = g[i] / a[i];
                push_lhs(d);
                break;
            }
            case OpTag::relu: {
                const Tensor& a = lhs_val();
                std::vector<double> d(n);
                for (std::size_t i = 0; i < n; ++i) d[i] = a[i] > 0.0 ? g[i] : 0.0;
                push_lhs(d);
                break;
            }
            case OpTag::sqrt: {
                std::vector<double> d(n);
                for (std::size_t i = 0; i < n; ++i) d[i] = g[i] / (2.0 * out[i]);
                push_lhs(d);
                break;
            }
            case OpTag::square: {
                const Tensor& a = lhs_val();
                std::vector<double> d(n);
                for (std::size_t i = 0; i < n; ++i) d[i] = 2.0 * a[i] * g[i];
                push_lhs(d);
                break;
            }
            case OpTag::log_softmax: {
                std::size_t m = out.rows(), c = out.cols();
                std::vector<double> d(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double gs = 0.0;
                    for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                    for (std::size_t j = 0; j < c; ++j) d[i * c + j] = g[i * c + j] - std::exp(out[i * c + j]) * gs;
                }
                push_lhs(d);
                break;
            }
            case OpTag::logaddexp: {
                const Tensor& a = lhs_val();
                const Tensor& b = rhs_val();
                std::vector<double> da(n), db(n);
                for (std::size_t i = 0; i < n; ++i) {
                    da[i] = g[i] * std::exp(at(a, i) - out[i]);
                    db[i] = g[i] * std::exp(at(b, i) - out[i]);
                }
                push_lhs(da);
                push_rhs(db);
                break;
            }
            case OpTag::sum:
            case OpTag::mean: {
                const Tensor& a = lhs_val();
                std::size_t total = a.size();
                std::vector<double> d(total);
                if (nd.axis < 0) {
                    double s = nd.op == OpTag::mean ? g[0] / static_cast<double>(total) : g[0];
                    std::fill(d.begin(), d.end(), s);
                } else {
                    std::size_t m = a.rows(), c = a.cols();
                    double div = 1.0;
                    if (nd.op == OpTag::mean) div = static_cast<double>(nd.axis == 0 ? m : c);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < c; ++j) d[i * c + j] = (nd.axis == 0 ? g[j] : g[i]) / div;
                }
                push_lhs(d);
                break;
            }
            case OpTag::add_row:
            case OpTag::sub_row:
            case OpTag::mul_row:
            case OpTag::div_row: {
                const Tensor& a = lhs_val();
                const Tensor& r = rhs_val();
                std::size_t m = a.rows(), c = a.cols();
                std::vector<double> da(m * c), dr(c, 0.0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        std::size_t k = i * c + j;
                        switch (nd.op) {
                            case OpTag::add_row:
                                da[k] = g[k];
                                dr[j] += g[k];
                                break;
                            case OpTag::sub_row:
                                da[k] = g[k];
                                dr[j] -= g[k];
                                break;
                            case OpTag::mul_row:
                                da[k] = g[k] * r[j];
                                dr[j] += g[k] * a[k];
                                break;
                            default:
                                da[k] = g[k] / r[j];
                                dr[j] -= g[k] * a[k] / (r[j] * r[j]);
                                break;
                        }
                    }
                push_lhs(da);
                push_rhs(dr);
                break;
            }
            case OpTag::l2_norm: {
                const Tensor& a = lhs_val();
                std::vector<double> d(a.size(), 0.0);
                if (out[0] > 0.0)
                    for (std::size_t i = 0; i < a.size(); ++i) d[i] = g[0] * a[i] / out[0];
                push_lhs(d);
                break;
            }
        }
    }

    GradientMap result;
    for (const Var& leaf : leaves) {
        const Tensor& v = value(leaf);
        if (leaf.id <= loss.id && grads[leaf.id].size() != 0) {
            result[leaf.id] = grads[leaf.id];
        } else {
            result[leaf.id] = Tensor::zeros(v.shape());
        }
    }
    return result;
}

Tensor Tape::gradient(Var loss, Var leaf) const {
    Var leaves[] = {leaf};
    return backward(loss, leaves).at(leaf.id);
}

std::vector<std::uint8_t> Tape::kink_signature() const {
    std::vector<std::uint8_t> sig;
    for (const Node& nd : nodes_) {
        if (nd.op == OpTag::relu) {
            for (double v : nodes_[nd.lhs].value.data()) sig.push_back(v > 0.0 ? 1 : 0);
        } else if (nd.op == OpTag::l2_norm) {
            sig.push_back(nd.value[0] > 0.0 ? 1 : 0);
        }
    }
    return sig;
}

FdReport finite_difference_check(const ScalarFn& f, const Tensor& x, double epsilon) {
    FdReport report;
    Tensor ad;
    std::vector<std::uint8_t> base_sig;
    {
        Tape tape;
        Var xv = tape.leaf(x);
        Var loss = f(tape, xv);
        ad = tape.gradient(loss, xv);
        base_sig = tape.kink_signature();
    }
    auto eval = [&](const Tensor& at, std::vector<std::uint8_t>& sig) {
        Tape tape;
        Var xv = tape.leaf(at);
        double v = tape.value(f(tape, xv)).item();
        sig = tape.kink_signature();
        return v;
    };
    Tensor probe = x;
    std::vector<std::uint8_t> sig_plus, sig_minus;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        probe[i] = orig + epsilon;
        double fp = eval(probe, sig_plus);
        probe[i] = orig - epsilon;
        double fm = eval(probe, sig_minus);
        probe[i] = orig;
        if (sig_plus != base_sig || sig_minus != base_sig) {
            ++report.skipped_kinks;
            continue;
        }
        double fd = (fp - fm) / (2.0 * epsilon);
        double denom = std::max({std::abs(ad[i]), std::abs(fd), 1e-8});
        report.max_rel_error = std::max(report.max_rel_error, std::abs(ad[i] - fd) / denom);
        ++report.checked;
    }
    return report;
}

}  // namespace codream
