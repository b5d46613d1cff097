#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "codream/acquisition.hpp"
#include "codream/aggregation.hpp"
#include "codream/comm.hpp"
#include "codream/data.hpp"
#include "codream/extraction.hpp"
#include "codream/model.hpp"

namespace codream {

enum class Method { codream, centralized, independent, fedavg, avgkd };
Method parse_method(const std::string& name);
const char* to_string(Method method);

// When clients and server learn from dreams.
//   per_epoch : once per outer epoch, after the R aggregation rounds
//   per_round : after every aggregation round, on the current dream state
enum class AcquisitionPlacement { per_epoch, per_round };

struct DataConfig {
    std::string source = "gaussian_mixture";  // or "csv"
    std::size_t train_size = 480;
    std::size_t test_size = 1200;
    std::size_t classes = 3;
    std::size_t dims = 16;
    double separation = 3.0;
    double alpha = kIidAlpha;
    std::string train_csv;
    std::string test_csv;
};

struct RoundConfig {
    std::size_t epochs = 30;          // N
    std::size_t rounds = 10;          // R
    std::size_t local_steps = 5;      // M
    double local_lr = 0.05;
    double global_lr = 1.0;
    std::size_t clients = 4;          // K
    std::size_t dream_batch = 32;     // n
    std::size_t warmup_epochs = 20;
    ExtractionCoefficients coeffs{1.0, 1.0, 1.0, 0.0};
    WeightScheme weighting = WeightScheme::proportional;
    ServerScheme server = ServerScheme::simple_avg;
    double server_beta1 = 0.9;
    double server_beta2 = 0.99;
    double server_tau = 1e-3;
    DreamOptimizer local_optimizer = DreamOptimizer::adam;
    AdaptiveScheme adaptive = AdaptiveScheme::jsd;
    bool collaborative = true;
    std::size_t buffer_capacity = 10;
    KdOptions kd;
    CeOptions ce;
    bool dreams_before_local = true;
    AcquisitionPlacement placement = AcquisitionPlacement::per_epoch;
    std::size_t guard_window = 3;
    double guard_threshold = 0.1;
    std::uint64_t seed = 0;

    // Throws ContractError naming the offending field.
    void validate() const;
};

struct ModelConfig {
    // Client k uses client_layers[k % size].
    std::vector<std::string> client_layers{"32bn,32bn"};
    std::string server_layers = "32bn,32bn";
};

struct ExperimentSpec {
    Method method = Method::codream;
    DataConfig data;
    ModelConfig models;
    RoundConfig round;

    void validate() const;
};

struct MetricRow {
    std::string method;
    std::uint64_t seed = 0;
    int round = 0;
    std::string client;  // numeric id or "server"
    std::string split;
    std::string metric;
    double value = 0.0;
};

struct MetricsRecord {
    std::string method;
    std::uint64_t seed = 0;
    std::vector<MetricRow> rows;
    CommLedger ledger;
    std::string architecture;  // client layer lists joined by '|'
    std::size_t clients = 0;

    void add(int round, const std::string& client, const std::string& split, const std::string& metric,
             double value);
    // Headline test accuracy of the last recorded round: the mean client
    // accuracy, or the single shared model for centralized / fedavg.
    double final_accuracy() const;
    std::optional<double> final_metric(const std::string& client, const std::string& metric) const;
    double final_client_mean(const std::string& metric) const;
};

struct Problem {
    Dataset train;
    Dataset test;
    PartitionPlan plan;
    std::vector<Dataset> shards;
};

Problem make_problem(const DataConfig& data, std::size_t clients, std::uint64_t seed);

// A federation participant. Across its boundary it only ever emits
// pseudo-gradients and soft labels; its parameters stay private.
class Client {
   public:
    Client(std::size_t id, Model model, Dataset data, std::uint64_t seed);

    std::size_t id() const { return id_; }
    std::size_t data_size() const { return data_.size(); }
    const ArchitectureSpec& spec() const { return model_.spec(); }

    void warmup(std::size_t epochs, const CeOptions& ce);
    PseudoGradient dream(const Tensor& x, const Model* server_view, const LocalDreamOptions& options,
                         double weight, std::vector<double>* losses = nullptr) const;
    Tensor soft_labels(const Tensor& x) const;
    // KD on dreams and (unless the guard tripped) cross-entropy on local data.
    void learn(const SoftLabelSet& dreams, const RoundConfig& cfg);
    void train_local(const CeOptions& ce);
    // Guard bookkeeping on a batch the client has not trained on yet.
    void observe_heldout(const SoftLabelSet& heldout, const RoundConfig& cfg);

    double test_accuracy(const Dataset& test) const;
    double own_accuracy() const;
    bool local_training_enabled() const { return !guard_.stopped; }
    // Order-sensitive digest of the private parameters (equality checks only).
    std::uint64_t fingerprint() const;

    double last_kd_loss = 0.0;
    double last_ce_loss = 0.0;

   private:
    std::size_t id_;
    Model model_;
    Dataset data_;
    Rng rng_;
    GuardState guard_;
    std::vector<double> heldout_history_;
};

struct FederationState {
    std::vector<Client> clients;
    Model server;
    DreamBuffer buffer;
    Dataset test;
    std::vector<double> weights;
    CommLedger ledger;
    std::vector<MetricRow> metrics;
    std::uint64_t seed = 0;
    int epoch = 0;
    Tensor last_dreams;  // final x of the most recent epoch
};

FederationState make_federation(const ExperimentSpec& spec, std::uint64_t seed);

void run_warmup(FederationState& state, std::size_t epochs, const CeOptions& ce);

// One outer epoch: fresh dreams, R aggregation rounds, soft labels, buffer
// push and knowledge acquisition.
void run_codream_round(FederationState& state, const RoundConfig& cfg);

MetricsRecord run_codream(const ExperimentSpec& spec);
// Weighted average of parameters and batchnorm running statistics; all
// models must share one architecture.
Model average_models(std::span<const Model> models, std::span<const double> weights);

MetricsRecord run_baseline(Method kind, const ExperimentSpec& spec);
MetricsRecord run_method(const ExperimentSpec& spec);

// Elements actually exchanged when a model is shipped: trainable parameters
// plus batchnorm running statistics.
std::size_t communicated_size(const Model& model);

}  // namespace codream
