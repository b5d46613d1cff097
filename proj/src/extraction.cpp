#include "codream/extraction.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "codream/fault_injection.hpp"

namespace codream {

namespace {
std::atomic<Fault> g_fault{Fault::none};
}

void inject_fault(Fault fault) { g_fault = fault; }
bool fault_active(Fault fault) { return fault != Fault::none && g_fault == fault; }

void ExtractionCoefficients::validate() const {
    if (w_entropy < 0 || w_bn < 0 || w_adv < 0 || w_l2 < 0) {
        throw ContractError("extraction coefficients must be nonnegative");
    }
    if (w_entropy == 0 && w_bn == 0 && w_adv == 0 && w_l2 == 0) {
        throw ContractError("extraction coefficients are all zero");
    }
}

void AdamState::reset(const Shape& shape) {
    m = Tensor::zeros(shape);
    v = Tensor::zeros(shape);
    t = 0;
}

Tensor AdamState::step(const Tensor& grad, double lr) {
    if (m.shape() != grad.shape()) reset(grad.shape());
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    std::vector<double> upd(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        upd[i] = -lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
    return Tensor::unchecked(grad.shape(), std::move(upd));
}

DreamBatch DreamBatch::fresh(std::size_t n, std::size_t dims, Rng& rng, int round) {
    DreamBatch b;
    b.x = standard_normal({n, dims}, rng);
    b.adam.reset(b.x.shape());
    b.origin_round = round;
    return b;
}

Var entropy_of_outputs(Var logits) {
    const double n = static_cast<double>(logits.value().rows());
    Var lsm = log_softmax(logits);
    return scale(sum(mul(exp(lsm), lsm)), -1.0 / n);
}

Var bn_regularizer(std::span<const BatchStatVars> stats, std::span<const BatchNormState> states) {
    if (stats.size() != states.size()) {
        throw ContractError("bn_regularizer: " + std::to_string(stats.size()) + " batch statistics for " +
                            std::to_string(states.size()) + " batchnorm layers");
    }
    if (stats.empty()) throw ContractError("bn_regularizer: model has no batchnorm layers");
    Tape& tape = *stats.front().mean.tape;
    Var total;
    for (std::size_t l = 0; l < stats.size(); ++l) {
        const BatchNormState& st = states[l];
        std::vector<double> sigma(st.running_var.size());
        for (std::size_t j = 0; j < sigma.size(); ++j) sigma[j] = std::sqrt(st.running_var[j] + st.epsilon);
        Var mean_gap = l2_norm(sub(stats[l].mean, tape.constant(st.running_mean)));
        Var batch_sigma = sqrt(add_scalar(stats[l].var, st.epsilon));
        Var sigma_gap =
            l2_norm(sub(batch_sigma, tape.constant(Tensor::unchecked(st.running_var.shape(), std::move(sigma)))));
        Var layer = add(mean_gap, sigma_gap);
        total = l == 0 ? layer : add(total, layer);
    }
    return total;
}

Var adv_regularizer(Var teacher_logits, Var student_logits) {
    const double n = static_cast<double>(teacher_logits.value().rows());
    Var lp = log_softmax(teacher_logits);
    Var lq = log_softmax(student_logits);
    // log m = log((p + q) / 2), computed without leaving log space.
    Var lm = add_scalar(logaddexp(lp, lq), -std::log(2.0));
    Var kl_p = sum(mul(exp(lp), sub(lp, lm)));
    Var kl_q = sum(mul(exp(lq), sub(lq, lm)));
    Var jsd = scale(add(kl_p, kl_q), 0.5 / n);
    return fault_active(Fault::jsd_sign) ? jsd : scale(jsd, -1.0);
}

double mean_jsd(const Tensor& p, const Tensor& q) {
    require_same_shape(p, q, "mean_jsd");
    const std::size_t c = p.cols(), rows = p.rows();
    auto term = [](double a, double m) { return a > 0.0 ? a * std::log(a / m) : 0.0; };
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double a = p[i * c + j], b = q[i * c + j];
            double m = 0.5 * (a + b);
            total += 0.5 * term(a, m) + 0.5 * term(b, m);
        }
    }
    return total / static_cast<double>(rows);
}

Var cross_entropy(Var logits, std::span<const int> labels) {
    const Tensor& z = logits.value();
    if (labels.size() != z.rows()) throw DimensionError("cross_entropy: label count does not match batch");
    const std::size_t c = z.cols();
    Tensor onehot = Tensor::zeros(z.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
        }
        onehot(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    Var lsm = log_softmax(logits);
    return scale(sum(mul(logits.tape->constant(std::move(onehot)), lsm)), -1.0 / static_cast<double>(labels.size()));
}

Var extraction_loss(Tape& tape, const Model& teacher, const Model* student, Var x,
                    const ExtractionCoefficients& coeffs) {
    coeffs.validate();
    if (coeffs.w_adv > 0.0 && student == nullptr) {
        throw ContractError("extraction_loss: adversarial weight set but no student model given");
    }
    auto tr = teacher.trace(tape, x, Mode::eval);
    Var total = scale(entropy_of_outputs(tr.logits), coeffs.w_entropy);
    if (coeffs.w_bn > 0.0 && !tr.batch_stats.empty()) {
        total = add(total, scale(bn_regularizer(tr.batch_stats, teacher.bn_states()), coeffs.w_bn));
    }
    if (coeffs.w_adv > 0.0) {
        auto st = student->trace(tape, x, Mode::eval);
        total = add(total, scale(adv_regularizer(tr.logits, st.logits), coeffs.w_adv));
    }
    if (coeffs.w_l2 > 0.0) {
        const double n = static_cast<double>(tape.value(x).rows());
        total = add(total, scale(sum(square(x)), coeffs.w_l2 / n));
    }
    return total;
}

Var deepdream_loss(Tape& tape, const Model& model, Var x, std::span<const int> labels, double w_bn) {
    auto tr = model.trace(tape, x, Mode::eval);
    Var total = cross_entropy(tr.logits, labels);
    if (w_bn > 0.0 && !tr.batch_stats.empty()) {
        total = add(total, scale(bn_regularizer(tr.batch_stats, model.bn_states()), w_bn));
    }
    return total;
}

Tensor extraction_gradient(const Model& teacher, const Model* student, const Tensor& x,
                           const ExtractionCoefficients& coeffs, double* loss_out) {
    Tape tape;
    Var xv = tape.leaf(x);
    Var loss = extraction_loss(tape, teacher, student, xv, coeffs);
    if (loss_out) *loss_out = loss.value().item();
    return tape.gradient(loss, xv);
}

Tensor adaptive_input_gradient(const Tensor& teacher_grad, const Tensor& student_grad) {
    return teacher_grad - student_grad;
}

LocalDreamResult local_dream_update(const Model& client, const Model* server, DreamBatch batch,
                                    const LocalDreamOptions& options) {
    if (options.steps == 0) throw ContractError("local_dream_update: need at least one local step");
    if (!(options.lr > 0.0)) throw ContractError("local_dream_update: learning rate must be positive");
    if (options.adaptive != AdaptiveScheme::none && server == nullptr) {
        throw ContractError("local_dream_update: adaptive teaching needs the server model");
    }

    ExtractionCoefficients teacher_coeffs = options.coeffs;
    if (options.adaptive != AdaptiveScheme::jsd) teacher_coeffs.w_adv = 0.0;
    ExtractionCoefficients student_coeffs = options.coeffs;
    student_coeffs.w_adv = 0.0;

    LocalDreamResult out;
    const Tensor x_before = batch.x;
    Tensor delta = Tensor::zeros(x_before.shape());
    batch.adam.reset(x_before.shape());
    Tensor x = x_before;
    for (std::size_t step = 0; step < options.steps; ++step) {
        double loss = 0.0;
        const Model* student = options.adaptive == AdaptiveScheme::jsd ? server : nullptr;
        Tensor grad = extraction_gradient(client, student, x, teacher_coeffs, &loss);
        if (options.adaptive == AdaptiveScheme::minmax) {
            double student_loss = 0.0;
            Tensor sgrad = extraction_gradient(*server, nullptr, x, student_coeffs, &student_loss);
            grad = adaptive_input_gradient(grad, sgrad);
            loss -= student_loss;
        }
        if (!std::isfinite(loss) || !grad.all_finite()) {
            throw NumericError("non-finite extraction loss at local step " + std::to_string(step));
        }
        out.losses.push_back(loss);
        Tensor update = options.optimizer == DreamOptimizer::adam ? batch.adam.step(grad, options.lr)
                                                                  : -options.lr * grad;
        delta += update;
        x = x_before + delta;
    }
    batch.x = std::move(x);
    out.batch = std::move(batch);
    out.pseudo_gradient = std::move(delta);
    return out;
}

}  // namespace codream
