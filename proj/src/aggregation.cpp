#include "codream/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "codream/rng.hpp"

namespace codream {

WeightScheme parse_weight_scheme(const std::string& name) {
    if (name == "proportional") return WeightScheme::proportional;
    if (name == "uniform") return WeightScheme::uniform;
    if (name == "inverse_size") return WeightScheme::inverse_size;
    throw ContractError("unknown weighting scheme '" + name + "'");
}

ServerScheme parse_server_scheme(const std::string& name) {
    if (name == "simple_avg") return ServerScheme::simple_avg;
    if (name == "fed_adam") return ServerScheme::fed_adam;
    throw ContractError("unknown server optimizer '" + name + "'");
}

const char* to_string(WeightScheme scheme) {
    switch (scheme) {
        case WeightScheme::proportional: return "proportional";
        case WeightScheme::uniform: return "uniform";
        case WeightScheme::inverse_size: return "inverse_size";
    }
    return "?";
}

const char* to_string(ServerScheme scheme) {
    return scheme == ServerScheme::simple_avg ? "simple_avg" : "fed_adam";
}

std::vector<double> client_weights(std::span<const std::size_t> sizes, WeightScheme scheme) {
    if (sizes.empty()) throw ContractError("client_weights: no clients");
    for (std::size_t s : sizes) {
        if (s == 0) throw ContractError("client_weights: dataset sizes must be positive");
    }
    std::vector<double> w(sizes.size());
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        const double s = static_cast<double>(sizes[k]);
        switch (scheme) {
            case WeightScheme::proportional: w[k] = s; break;
            case WeightScheme::uniform: w[k] = 1.0; break;
            case WeightScheme::inverse_size: w[k] = 1.0 / s; break;
        }
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& v : w) v /= total;
    return w;
}

namespace {

std::vector<const PseudoGradient*> sorted_by_id(std::span<const PseudoGradient> deltas) {
    if (deltas.empty()) throw ContractError("aggregation needs at least one pseudo-gradient");
    std::vector<const PseudoGradient*> order;
    for (const auto& d : deltas) order.push_back(&d);
    std::sort(order.begin(), order.end(),
              [](const PseudoGradient* a, const PseudoGradient* b) { return a->client_id < b->client_id; });
    for (std::size_t i = 1; i < order.size(); ++i) {
        if (order[i]->client_id == order[i - 1]->client_id) {
            throw ContractError("aggregation: duplicate client id " + std::to_string(order[i]->client_id));
        }
    }
    double total = 0.0;
    for (const auto* d : order) {
        require_same_shape(d->delta, order.front()->delta, "aggregate_deltas");
        if (!(d->weight > 0.0)) throw ContractError("aggregation: weights must be positive");
        if (!d->delta.all_finite()) {
            throw NumericError("aggregation: non-finite pseudo-gradient from client " + std::to_string(d->client_id));
        }
        total += d->weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ContractError("aggregation: weights must sum to 1");
    return order;
}

}  // namespace

Tensor aggregate_deltas(std::span<const PseudoGradient> deltas) {
    auto order = sorted_by_id(deltas);
    Tensor out = Tensor::zeros(order.front()->delta.shape());
    for (const auto* d : order) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += d->weight * d->delta[i];
    }
    return out;
}

void ServerOptimizerState::reset() {
    m = Tensor();
    v = Tensor();
    t = 0;
}

Tensor server_apply(const Tensor& x, const Tensor& mean_delta, ServerOptimizerState& state) {
    require_same_shape(x, mean_delta, "server_apply");
    if (state.scheme == ServerScheme::simple_avg) return x + state.global_lr * mean_delta;

    if (!(state.tau > 0.0)) throw ContractError("server_apply: tau must be positive");
    if (state.m.shape() != x.shape()) {
        state.m = Tensor::zeros(x.shape());
        state.v = Tensor::zeros(x.shape());
        state.t = 0;
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    Tensor out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double g = mean_delta[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        out[i] += state.global_lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + state.tau);
    }
    return out;
}

std::vector<std::vector<std::uint64_t>> make_pair_seeds(std::size_t num_clients, std::uint64_t seed) {
    std::vector<std::vector<std::uint64_t>> table(num_clients, std::vector<std::uint64_t>(num_clients, 0));
    for (std::size_t i = 0; i < num_clients; ++i) {
        for (std::size_t j = i + 1; j < num_clients; ++j) {
            table[i][j] = table[j][i] = mix_seed(seed, i * num_clients + j);
        }
    }
    return table;
}

MaskedAggregate secure_masked_aggregate(std::span<const PseudoGradient> deltas,
                                        const std::vector<std::vector<std::uint64_t>>& pair_seeds,
                                        double mask_scale) {
    auto order = sorted_by_id(deltas);
    const std::size_t k = pair_seeds.size();
    for (std::size_t i = 0; i < k; ++i) {
        if (pair_seeds[i].size() != k) throw ContractError("secure aggregation: seed table is not square");
        for (std::size_t j = 0; j < k; ++j) {
            if (i != j && pair_seeds[i][j] != pair_seeds[j][i]) {
                throw ContractError("secure aggregation: seed table is not symmetric at (" + std::to_string(i) +
                                    ", " + std::to_string(j) + ")");
            }
        }
    }
    for (const auto* d : order) {
        if (d->client_id >= k) throw ContractError("secure aggregation: client id outside the seed table");
    }

    const Shape shape = order.front()->delta.shape();
    auto mask = [&](std::uint64_t s) {
        Rng rng(s);
        return standard_normal(shape, rng, mask_scale);
    };

    MaskedAggregate out;
    out.sum = Tensor::zeros(shape);
    for (const auto* d : order) {
        Tensor upload = d->weight * d->delta;
        for (const auto* peer : order) {
            const std::size_t i = d->client_id, j = peer->client_id;
            if (i == j) continue;
            Tensor m = mask(pair_seeds[std::min(i, j)][std::max(i, j)]);
            upload = j > i ? upload + m : upload - m;
        }
        out.sum += upload;
        out.masked_uploads.push_back(std::move(upload));
    }
    return out;
}

}  // namespace codream
