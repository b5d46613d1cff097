#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "codream/data.hpp"
#include "codream/model.hpp"
#include "codream/rng.hpp"

namespace codream {

struct SoftLabelBatch {
    Tensor x;  // n x d
    Tensor y;  // n x C, rows on the simplex
};

struct SoftLabelSet {
    std::vector<SoftLabelBatch> batches;

    void add(Tensor x, Tensor y);
    bool empty() const { return batches.empty(); }
    std::size_t size() const { return batches.size(); }
    std::size_t rows() const;
    static SoftLabelSet from_buffer(const DreamBuffer& buffer);
};

// Weighted mean of probability rows, each row divided by its sum afterwards.
Tensor aggregate_soft_labels(std::span<const Tensor> per_client_probs, std::span<const double> weights);

// tau^2 * mean_rows KL(target || softmax(student_logits / tau)); 0 log 0 = 0.
Var kd_loss(Var student_logits, const Tensor& target_probs, double temperature = 1.0);

// Plain-value mean_rows KL(p || q).
double mean_kl(const Tensor& p, const Tensor& q);

// Heavy-ball SGD over a model's parameter list. Velocity starts at zero.
class SgdMomentum {
   public:
    SgdMomentum(double lr, double momentum);
    void step(Model& model, const std::vector<Tensor>& grads);

   private:
    double lr_;
    double momentum_;
    std::vector<Tensor> velocity_;
};

struct KdOptions {
    std::size_t epochs = 1;
    double lr = 0.05;
    double momentum = 0.9;
    double temperature = 1.0;
    // Eval keeps batchnorm on the running statistics learned from real data;
    // dreams never overwrite them.
    Mode mode = Mode::eval;
};

struct CeOptions {
    std::size_t epochs = 1;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t batch_size = 32;
};

struct TrainTrace {
    std::vector<double> epoch_loss;  // mean batch loss per epoch
    double initial_loss = 0.0;       // loss of the incoming model on the data
    double final_loss = 0.0;         // loss of the returned model on the data
};

// Each stored batch is one SGD step per epoch, visited in shuffled order.
Model train_on_dreams(Model model, const SoftLabelSet& dreams, const KdOptions& options, Rng& rng,
                      TrainTrace* trace = nullptr);

// Mini-batch cross-entropy in train mode; running stats advance.
Model train_on_local(Model model, const Dataset& data, const CeOptions& options, Rng& rng,
                     TrainTrace* trace = nullptr);

double mean_kd_loss(const Model& model, const SoftLabelSet& dreams, double temperature = 1.0);
double mean_cross_entropy(const Model& model, const Dataset& data);

double accuracy(const Model& model, const Tensor& x, std::span<const int> labels);
double accuracy(const Model& model, const Dataset& data);
// Agreement of argmax predictions with argmax of soft targets.
double soft_accuracy(const Model& model, const SoftLabelSet& dreams);

struct GuardState {
    bool stopped = false;
};

// False once accuracy averaged over the last `window` entries sits more than
// `drop_threshold` below the best entry before that window. Sticky.
bool divergence_guard(std::span<const double> history, std::size_t window, double drop_threshold,
                      GuardState& state);

// (onehot + sum of peer probabilities) / (peers + 1).
Tensor avgkd_targets(const Tensor& onehot, std::span<const Tensor> peer_probs);

Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

}  // namespace codream
