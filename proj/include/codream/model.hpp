#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "codream/autodiff.hpp"
#include "codream/tensor.hpp"

namespace codream {

enum class Activation { relu };
enum class Mode { train, eval };

struct HiddenLayer {
    std::size_t width = 0;
    bool batchnorm = false;
    friend bool operator==(const HiddenLayer&, const HiddenLayer&) = default;
};

struct ArchitectureSpec {
    std::string name;
    std::size_t input_dim = 0;
    std::vector<HiddenLayer> hidden;
    std::size_t num_classes = 0;
    Activation activation = Activation::relu;

    void validate() const;
    // Layer list as "32bn,16" (bn suffix marks a batchnorm layer).
    std::string layers_string() const;
    std::uint64_t hash() const;

    static ArchitectureSpec parse(std::string_view layers, std::size_t input_dim, std::size_t num_classes,
                                  std::string name = {});

    friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

struct DenseLayer {
    Tensor weight;  // fan_in x fan_out
    Tensor bias;    // 1 x fan_out
};

struct BatchNormState {
    Tensor running_mean;  // 1 x width
    Tensor running_var;   // 1 x width
    Tensor gamma;
    Tensor beta;
    double momentum = 0.1;
    double epsilon = 1e-5;
};

// Per-batchnorm-layer statistics of the pre-normalization features.
struct BatchStats {
    Tensor mean;
    Tensor var;  // biased (divide by n)
};

struct BatchStatVars {
    Var mean;
    Var var;
};

struct ForwardTrace {
    Var logits;
    std::vector<BatchStatVars> batch_stats;
    std::vector<Var> params;  // parameter_vector order

    std::vector<BatchStats> stat_values() const;
};

struct ForwardResult {
    Tensor logits;
    std::vector<BatchStats> batch_stats;
};

// Dense classifier: [linear -> (batchnorm) -> relu]* -> linear.
class Model {
   public:
    Model() = default;

    // He-normal weights (std = sqrt(2 / fan_in)), zero biases, unit gamma,
    // zero beta, running mean 0 / running var 1. Deterministic in seed.
    static Model build(const ArchitectureSpec& spec, std::uint64_t seed);

    const ArchitectureSpec& spec() const { return spec_; }

    // Records the forward pass on `tape`. Train mode normalizes with batch
    // statistics; eval mode with running statistics. Never mutates.
    ForwardTrace trace(Tape& tape, Var x, Mode mode) const;

    // running <- (1 - momentum) * running + momentum * batch.
    void update_running_stats(const std::vector<BatchStats>& stats);

    // Train mode also commits the running-stat update.
    ForwardResult forward(const Tensor& x, Mode mode);
    ForwardResult forward(const Tensor& x) const;

    Tensor predict_proba(const Tensor& x) const;
    std::vector<int> predict(const Tensor& x) const;

    std::size_t parameter_count() const;
    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;

    std::vector<DenseLayer>& layers() { return layers_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<BatchNormState>& bn_states() { return bn_; }
    const std::vector<BatchNormState>& bn_states() const { return bn_; }

   private:
    void check_input(const Tensor& x, Mode mode) const;

    ArchitectureSpec spec_;
    std::vector<DenseLayer> layers_;
    std::vector<BatchNormState> bn_;
    std::vector<int> bn_index_;  // per hidden layer, -1 when no batchnorm
};

inline Model build_model(const ArchitectureSpec& spec, std::uint64_t seed) { return Model::build(spec, seed); }

// Flattened parameters: per layer weight then bias, then gamma then beta
// when that layer has batchnorm. Running statistics are not included.
Tensor parameter_vector(const Model& model);
Model load_parameter_vector(Model model, const Tensor& v);

using TraceLoss = std::function<Var(Tape&, const ForwardTrace&)>;

// Gradient of loss(forward(x)) with respect to x under frozen-teacher
// semantics: running-stat normalization, batch stats still reported.
Tensor input_gradient(const Model& model, const Tensor& x, const TraceLoss& loss);

// Checkpoint: "CDRMPV01" magic, u64 spec hash, u64 count, count f64 values;
// all little-endian.
void save_parameters(const std::filesystem::path& path, const Model& model);
Model load_parameters(const std::filesystem::path& path, Model model);

}  // namespace codream
