#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "codream/tensor.hpp"

namespace codream {

struct PseudoGradient {
    std::size_t client_id = 0;
    Tensor delta;  // n x d, x_after - x_before
    double weight = 1.0;
};

enum class WeightScheme { proportional, uniform, inverse_size };
enum class ServerScheme { simple_avg, fed_adam };

WeightScheme parse_weight_scheme(const std::string& name);
ServerScheme parse_server_scheme(const std::string& name);
const char* to_string(WeightScheme scheme);
const char* to_string(ServerScheme scheme);

// proportional: |D_k| / sum |D_j|; uniform: 1/K; inverse_size:
// (1/|D_k|) / sum (1/|D_j|).
std::vector<double> client_weights(std::span<const std::size_t> dataset_sizes, WeightScheme scheme);

// sum_k w_k * delta_k, reduced in ascending client_id order so the result
// does not depend on arrival order. Weights come from each PseudoGradient.
Tensor aggregate_deltas(std::span<const PseudoGradient> deltas);

struct ServerOptimizerState {
    ServerScheme scheme = ServerScheme::simple_avg;
    double global_lr = 1.0;
    Tensor m;
    Tensor v;
    std::size_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double tau = 1e-3;

    void reset();
};

// simple_avg: x + lr * mean_delta. fed_adam: moments of mean_delta (the
// negated gradient) with bias correction, x + lr * m_hat / (sqrt(v_hat) + tau).
Tensor server_apply(const Tensor& x, const Tensor& mean_delta, ServerOptimizerState& state);

// Symmetric K x K table; diagonal unused.
std::vector<std::vector<std::uint64_t>> make_pair_seeds(std::size_t num_clients, std::uint64_t seed);

struct MaskedAggregate {
    Tensor sum;
    std::vector<Tensor> masked_uploads;  // per client, ascending id
};

// Each client uploads w_k * delta_k + sum_{j>k} PRG(s_kj) - sum_{j<k} PRG(s_jk);
// masks cancel in the server sum. PRG draws are N(0, mask_scale^2).
MaskedAggregate secure_masked_aggregate(std::span<const PseudoGradient> deltas,
                                        const std::vector<std::vector<std::uint64_t>>& pair_seeds,
                                        double mask_scale = 100.0);

}  // namespace codream
