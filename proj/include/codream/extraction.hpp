#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "codream/autodiff.hpp"
#include "codream/model.hpp"
#include "codream/rng.hpp"

namespace codream {

struct ExtractionCoefficients {
    double w_entropy = 1.0;
    double w_bn = 1.0;
    double w_adv = 1.0;
    double w_l2 = 0.0;  // optional input-norm prior, off by default

    void validate() const;
};

struct AdamState {
    Tensor m;
    Tensor v;
    std::size_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void reset(const Shape& shape);
    // Returns the step -lr * m_hat / (sqrt(v_hat) + eps).
    Tensor step(const Tensor& grad, double lr);
};

struct DreamBatch {
    Tensor x;  // n x d
    AdamState adam;
    int origin_round = 0;

    // x ~ N(0, 1).
    static DreamBatch fresh(std::size_t n, std::size_t dims, Rng& rng, int round);
};

enum class DreamOptimizer { adam, sgd };

// How the student (server) model shapes local extraction.
//   none   : no student term
//   jsd    : w_adv * -JSD(teacher || student) inside the loss
//   minmax : gradient = grad l(x, teacher) - grad l(x, student)
enum class AdaptiveScheme { none, jsd, minmax };

// Mean over rows of H(softmax(row)), in nats.
Var entropy_of_outputs(Var logits);

// Sum over layers of ||mu_batch - mu_running|| + ||sigma_batch - sigma_running||
// with sigma = sqrt(var + eps).
Var bn_regularizer(std::span<const BatchStatVars> stats, std::span<const BatchNormState> states);

// -mean_rows JSD(softmax(teacher) || softmax(student)), natural log.
Var adv_regularizer(Var teacher_logits, Var student_logits);

// Probability-space JSD averaged over rows, with 0 log 0 = 0.
double mean_jsd(const Tensor& p, const Tensor& q);

Var cross_entropy(Var logits, std::span<const int> labels);

// w_entropy * H + w_bn * R_bn + w_adv * R_adv (+ w_l2 * mean ||x||^2).
// Teachers and students are frozen: running-stat normalization.
Var extraction_loss(Tape& tape, const Model& teacher, const Model* student, Var x,
                    const ExtractionCoefficients& coeffs);

// Classic target-label inversion: CE(f(x), y) + w_bn * R_bn.
Var deepdream_loss(Tape& tape, const Model& model, Var x, std::span<const int> labels, double w_bn = 1.0);

Tensor extraction_gradient(const Model& teacher, const Model* student, const Tensor& x,
                           const ExtractionCoefficients& coeffs, double* loss_out = nullptr);

// teacher_grad - student_grad.
Tensor adaptive_input_gradient(const Tensor& teacher_grad, const Tensor& student_grad);

struct LocalDreamOptions {
    std::size_t steps = 5;
    double lr = 0.05;
    DreamOptimizer optimizer = DreamOptimizer::adam;
    AdaptiveScheme adaptive = AdaptiveScheme::none;
    ExtractionCoefficients coeffs;
};

struct LocalDreamResult {
    DreamBatch batch;       // x == x_before + pseudo_gradient, bitwise
    Tensor pseudo_gradient; // accumulated local change
    std::vector<double> losses;
};

// M optimizer steps on x against a frozen client model. Adam state starts
// fresh for every call. The client model is never written.
LocalDreamResult local_dream_update(const Model& client, const Model* server, DreamBatch batch,
                                    const LocalDreamOptions& options);

}  // namespace codream
