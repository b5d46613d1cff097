#include "codream/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "codream/extraction.hpp"

namespace codream {

void SoftLabelSet::add(Tensor x, Tensor y) {
    if (x.rows() != y.rows()) throw DimensionError("SoftLabelSet: dream and label row counts differ");
    require_simplex_rows(y, 1e-9, "SoftLabelSet");
    batches.push_back({std::move(x), std::move(y)});
}

std::size_t SoftLabelSet::rows() const {
    std::size_t n = 0;
    for (const auto& b : batches) n += b.x.rows();
    return n;
}

SoftLabelSet SoftLabelSet::from_buffer(const DreamBuffer& buffer) {
    SoftLabelSet s;
    for (const auto& e : buffer.entries()) s.batches.push_back({e.x, e.y});
    return s;
}

Tensor aggregate_soft_labels(std::span<const Tensor> probs, std::span<const double> weights) {
    if (probs.empty()) throw ContractError("aggregate_soft_labels: no client predictions");
    if (probs.size() != weights.size()) throw ContractError("aggregate_soft_labels: weights not aligned");
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(wsum - 1.0) > 1e-9) throw ContractError("aggregate_soft_labels: weights must sum to 1");
    for (const auto& p : probs) {
        require_same_shape(p, probs.front(), "aggregate_soft_labels");
        require_simplex_rows(p, 1e-6, "aggregate_soft_labels");
    }
    const std::size_t n = probs.front().rows(), c = probs.front().cols();
    std::vector<double> out(n * c, 0.0);
    for (std::size_t k = 0; k < probs.size(); ++k) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * probs[k][i];
    }
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += out[r * c + j];
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= s;
    }
    return Tensor(probs.front().shape(), std::move(out));
}

Var kd_loss(Var student_logits, const Tensor& target, double temperature) {
    if (!(temperature > 0.0)) throw ContractError("kd_loss: temperature must be positive");
    const Tensor& z = student_logits.value();
    require_same_shape(z, target, "kd_loss");
    const double n = static_cast<double>(z.rows());
    double neg_entropy = 0.0;
    for (double t : target.values()) {
        if (t > 0.0) neg_entropy += t * std::log(t);
    }
    const double t2 = temperature * temperature;
    Var lsm = log_softmax(temperature == 1.0 ? student_logits : scale(student_logits, 1.0 / temperature));
    Var cross = sum(mul(student_logits.tape->constant(target), lsm));
    return add_scalar(scale(cross, -t2 / n), t2 * neg_entropy / n);
}

double mean_kl(const Tensor& p, const Tensor& q) {
    require_same_shape(p, q, "mean_kl");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) total += p[i] * std::log(p[i] / q[i]);
    }
    return total / static_cast<double>(p.rows());
}

SgdMomentum::SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (lr < 0.0) throw ContractError("SGD learning rate must be nonnegative");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("SGD momentum must lie in [0, 1)");
}

void SgdMomentum::step(Model& model, const std::vector<Tensor>& grads) {
    auto params = model.parameters();
    if (grads.size() != params.size()) throw ContractError("SgdMomentum: gradient count mismatch");
    if (velocity_.empty()) {
        for (const auto* p : params) velocity_.push_back(Tensor::zeros(p->shape()));
    }
    if (lr_ == 0.0) return;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& v = velocity_[k];
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i];
            p[i] -= lr_ * v[i];
        }
    }
}

namespace {

std::vector<Tensor> param_grads(const Tape& tape, Var loss, const ForwardTrace& tr) {
    GradientMap gm = tape.backward(loss, tr.params);
    std::vector<Tensor> grads;
    grads.reserve(tr.params.size());
    for (const Var& p : tr.params) grads.push_back(std::move(gm.at(p.id)));
    return grads;
}

void require_finite(double loss, const char* what, std::size_t epoch) {
    if (!std::isfinite(loss)) {
        throw NumericError(std::string(what) + ": non-finite loss in epoch " + std::to_string(epoch));
    }
}

bool needs_pairs(const Model& model) { return !model.bn_states().empty(); }

}  // namespace

double mean_kd_loss(const Model& model, const SoftLabelSet& dreams, double temperature) {
    if (dreams.empty()) throw ContractError("mean_kd_loss: empty dream set");
    double total = 0.0;
    for (const auto& b : dreams.batches) {
        Tape tape;
        auto tr = model.trace(tape, tape.leaf(b.x), Mode::eval);
        total += kd_loss(tr.logits, b.y, temperature).value().item() * static_cast<double>(b.x.rows());
    }
    return total / static_cast<double>(dreams.rows());
}

double mean_cross_entropy(const Model& model, const Dataset& data) {
    if (data.size() == 0) throw ContractError("mean_cross_entropy: empty dataset");
    Tape tape;
    auto tr = model.trace(tape, tape.leaf(data.features), Mode::eval);
    return cross_entropy(tr.logits, data.labels).value().item();
}

Model train_on_dreams(Model model, const SoftLabelSet& dreams, const KdOptions& options, Rng& rng,
                      TrainTrace* trace) {
    if (dreams.empty()) throw ContractError("train_on_dreams: empty dream set");
    SgdMomentum opt(options.lr, options.momentum);
    if (trace) trace->initial_loss = mean_kd_loss(model, dreams, options.temperature);
    std::vector<std::size_t> order(dreams.size());
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t idx : order) {
            const auto& b = dreams.batches[idx];
            if (options.mode == Mode::train && needs_pairs(model) && b.x.rows() < 2) continue;
            Tape tape;
            auto tr = model.trace(tape, tape.leaf(b.x), options.mode);
            Var loss = kd_loss(tr.logits, b.y, options.temperature);
            const double lv = loss.value().item();
            require_finite(lv, "train_on_dreams", epoch);
            auto grads = param_grads(tape, loss, tr);
            if (options.mode == Mode::train) model.update_running_stats(tr.stat_values());
            opt.step(model, grads);
            epoch_loss += lv;
            ++steps;
        }
        if (trace) trace->epoch_loss.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
    }
    if (trace) trace->final_loss = mean_kd_loss(model, dreams, options.temperature);
    return model;
}

Model train_on_local(Model model, const Dataset& data, const CeOptions& options, Rng& rng, TrainTrace* trace) {
    if (data.size() == 0) throw ContractError("train_on_local: empty dataset");
    if (options.batch_size == 0) throw ContractError("train_on_local: batch size must be positive");
    SgdMomentum opt(options.lr, options.momentum);
    if (trace) trace->initial_loss = mean_cross_entropy(model, data);
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (const auto& rows : minibatches(data.size(), options.batch_size, rng)) {
            // A lone sample cannot be batch-normalized.
            if (rows.size() < 2 && needs_pairs(model)) continue;
            Tensor xb = gather_rows(data.features, rows);
            std::vector<int> yb;
            yb.reserve(rows.size());
            for (std::size_t r : rows) yb.push_back(data.labels[r]);
            Tape tape;
            auto tr = model.trace(tape, tape.leaf(std::move(xb)), Mode::train);
            Var loss = cross_entropy(tr.logits, yb);
            const double lv = loss.value().item();
            require_finite(lv, "train_on_local", epoch);
            auto grads = param_grads(tape, loss, tr);
            model.update_running_stats(tr.stat_values());
            opt.step(model, grads);
            epoch_loss += lv;
            ++steps;
        }
        if (trace) trace->epoch_loss.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
    }
    if (trace) trace->final_loss = mean_cross_entropy(model, data);
    return model;
}

double accuracy(const Model& model, const Tensor& x, std::span<const int> labels) {
    if (labels.empty()) throw ContractError("accuracy: no samples");
    auto pred = model.predict(x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double accuracy(const Model& model, const Dataset& data) { return accuracy(model, data.features, data.labels); }

double soft_accuracy(const Model& model, const SoftLabelSet& dreams) {
    if (dreams.empty()) throw ContractError("soft_accuracy: empty dream set");
    std::size_t hit = 0;
    for (const auto& b : dreams.batches) {
        auto pred = model.predict(b.x);
        const std::size_t c = b.y.cols();
        for (std::size_t r = 0; r < pred.size(); ++r) {
            auto first = b.y.values().begin() + static_cast<std::ptrdiff_t>(r * c);
            hit += static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(c)) - first) == pred[r];
        }
    }
    return static_cast<double>(hit) / static_cast<double>(dreams.rows());
}

bool divergence_guard(std::span<const double> history, std::size_t window, double drop_threshold,
                      GuardState& state) {
    if (window == 0) throw ContractError("divergence_guard: window must be at least 1");
    if (state.stopped) return false;
    if (history.size() <= window) return true;
    const auto split = history.end() - static_cast<std::ptrdiff_t>(window);
    const double best = *std::max_element(history.begin(), split);
    const double recent = std::accumulate(split, history.end(), 0.0) / static_cast<double>(window);
    if (best - recent > drop_threshold) state.stopped = true;
    return !state.stopped;
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
    Tensor out = Tensor::zeros({labels.size(), num_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw ContractError("one_hot: label " + std::to_string(labels[i]) + " out of range");
        }
        out(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return out;
}

Tensor avgkd_targets(const Tensor& onehot, std::span<const Tensor> peer_probs) {
    Tensor acc = onehot;
    for (const auto& p : peer_probs) {
        require_same_shape(p, onehot, "avgkd_targets");
        acc += p;
    }
    return (1.0 / static_cast<double>(peer_probs.size() + 1)) * acc;
}

}  // namespace codream
