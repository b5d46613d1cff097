#include <algorithm>
#include <cmath>

#include "codream/aggregation.hpp"
#include "codream/extraction.hpp"
#include "doctest.h"

using namespace codream;

namespace {

std::vector<PseudoGradient> random_deltas(std::size_t k, Shape shape, std::uint64_t seed) {
    Rng rng = make_rng(seed, 40);
    std::vector<PseudoGradient> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back({i, standard_normal(shape, rng), 1.0 / static_cast<double>(k)});
    return out;
}

Model client_model(std::size_t i, std::uint64_t seed) {
    // Mixed architectures: aggregation only sees input-space tensors.
    const char* layers[] = {"6bn", "5bn,4bn", "8bn,3", "4bn,4bn,4bn"};
    Model m = Model::build(ArchitectureSpec::parse(layers[i % 4], 3, 3), mix_seed(seed, i));
    Rng rng = make_rng(seed, 100 + i);
    for (auto& bn : m.bn_states()) {
        bn.running_mean = standard_normal(bn.running_mean.shape(), rng, 0.5);
        Tensor v = standard_normal(bn.running_var.shape(), rng, 0.3);
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = 0.5 + v[j] * v[j];
        bn.running_var = v;
    }
    return m;
}

}  // namespace

TEST_CASE("client weights") {
    std::vector<std::size_t> sizes{100, 300};
    auto p = client_weights(sizes, WeightScheme::proportional);
    CHECK(p[0] == doctest::Approx(0.25));
    CHECK(p[1] == doctest::Approx(0.75));
    auto inv = client_weights(sizes, WeightScheme::inverse_size);
    CHECK(inv[0] == doctest::Approx(0.75));
    CHECK(inv[1] == doctest::Approx(0.25));
    std::vector<std::size_t> equal{7, 7, 7};
    for (auto s : {WeightScheme::proportional, WeightScheme::uniform, WeightScheme::inverse_size})
        for (double w : client_weights(equal, s)) CHECK(w == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS(client_weights({}, WeightScheme::uniform));
    std::vector<std::size_t> zero{0, 3};
    CHECK_THROWS(client_weights(zero, WeightScheme::proportional));
    CHECK(parse_weight_scheme("uniform") == WeightScheme::uniform);
    CHECK(std::string(to_string(ServerScheme::fed_adam)) == "fed_adam");
    CHECK_THROWS(parse_server_scheme("fedyogi"));
}

TEST_CASE("aggregate deltas examples") {
    std::vector<PseudoGradient> d{{0, Tensor::matrix({{1, 3}}), 0.5}, {1, Tensor::matrix({{3, 1}}), 0.5}};
    CHECK(aggregate_deltas(d) == Tensor::matrix({{2, 2}}));
    std::vector<PseudoGradient> one{{4, Tensor::matrix({{0.1, -7}}), 1.0}};
    CHECK(aggregate_deltas(one) == one[0].delta);

    std::vector<PseudoGradient> bad_shape{{0, Tensor::matrix({{1, 3}}), 0.5}, {1, Tensor::matrix({{3}}), 0.5}};
    CHECK_THROWS(aggregate_deltas(bad_shape));
    std::vector<PseudoGradient> dup{{0, Tensor::matrix({{1}}), 0.5}, {0, Tensor::matrix({{3}}), 0.5}};
    CHECK_THROWS(aggregate_deltas(dup));
    std::vector<PseudoGradient> unnormalized{{0, Tensor::matrix({{1}}), 0.5}, {1, Tensor::matrix({{3}}), 0.6}};
    CHECK_THROWS(aggregate_deltas(unnormalized));
}

TEST_CASE("aggregation ignores arrival order bit for bit") {
    auto d = random_deltas(7, {5, 4}, 1);
    for (std::size_t i = 0; i < d.size(); ++i) d[i].weight = (1.0 + static_cast<double>(i)) / 28.0;
    Tensor ref = aggregate_deltas(d);
    Rng rng = make_rng(2);
    for (int t = 0; t < 20; ++t) {
        std::shuffle(d.begin(), d.end(), rng);
        CHECK(aggregate_deltas(d) == ref);
    }
}

TEST_CASE("aggregation is linear") {
    auto d1 = random_deltas(5, {3, 4}, 3), d2 = random_deltas(5, {3, 4}, 4);
    const double a = 0.3, b = -2.2;
    std::vector<PseudoGradient> mix = d1;
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i].delta = a * d1[i].delta + b * d2[i].delta;
    CHECK(max_abs_diff(aggregate_deltas(mix), a * aggregate_deltas(d1) + b * aggregate_deltas(d2)) <= 1e-12);
}

TEST_CASE("server apply") {
    Tensor x = Tensor::matrix({{1, 2}, {3, 4}});
    ServerOptimizerState simple;
    CHECK(server_apply(x, Tensor::zeros({2, 2}), simple) == x);
    simple.global_lr = 0.5;
    CHECK(server_apply(x, Tensor::filled({2, 2}, 2.0), simple) == x + Tensor::filled({2, 2}, 1.0));
    CHECK(simple.t == 0);

    // Closed-form first bias-corrected Adam step: m_hat = g, v_hat = g^2.
    ServerOptimizerState adam;
    adam.scheme = ServerScheme::fed_adam;
    adam.global_lr = 0.1;
    Tensor delta = Tensor::matrix({{0.5, -2.0}, {3.0, 1e-2}});
    Tensor next = server_apply(x, delta, adam);
    for (std::size_t i = 0; i < 4; ++i) {
        double want = x[i] + 0.1 * delta[i] / (std::abs(delta[i]) + adam.tau);
        CHECK(std::abs(next[i] - want) <= 1e-14);
        CHECK(std::abs(std::abs(next[i] - x[i]) - 0.1) < 0.01);
    }
    CHECK(adam.t == 1);

    // Second step against a hand-rolled recursion.
    Tensor delta2 = Tensor::matrix({{-0.5, 1.0}, {0.0, 2.0}});
    Tensor after = server_apply(next, delta2, adam);
    for (std::size_t i = 0; i < 4; ++i) {
        double m = 0.9 * (0.1 * delta[i]) + 0.1 * delta2[i];
        double v = 0.99 * (0.01 * delta[i] * delta[i]) + 0.01 * delta2[i] * delta2[i];
        double mh = m / (1 - 0.81), vh = v / (1 - 0.99 * 0.99);
        CHECK(std::abs(after[i] - (next[i] + 0.1 * mh / (std::sqrt(vh) + 1e-3))) <= 1e-13);
    }
    adam.reset();
    CHECK(adam.t == 0);
}

TEST_CASE("one aggregated SGD step equals distributed SGD on the mean loss") {
    const ExtractionCoefficients coeffs{1, 1, 0, 0};
    for (std::size_t k = 2; k <= 8; ++k) {
        std::vector<Model> models;
        for (std::size_t i = 0; i < k; ++i) models.push_back(client_model(i, k));
        Rng rng = make_rng(k, 5);
        Tensor x = standard_normal({6, 3}, rng);
        std::vector<PseudoGradient> deltas;
        for (std::size_t i = 0; i < k; ++i) {
            DreamBatch b;
            b.x = x;
            auto r = local_dream_update(models[i], nullptr, b, {1, 1.0, DreamOptimizer::sgd, AdaptiveScheme::none, coeffs});
            deltas.push_back({i, r.pseudo_gradient, 1.0 / static_cast<double>(k)});
        }
        ServerOptimizerState st;
        Tensor got = server_apply(x, aggregate_deltas(deltas), st);

        // Centralized oracle: one tape, gradient of the mean of all client losses.
        Tape tape;
        Var xv = tape.leaf(x);
        Var total = extraction_loss(tape, models[0], nullptr, xv, coeffs);
        for (std::size_t i = 1; i < k; ++i) total = add(total, extraction_loss(tape, models[i], nullptr, xv, coeffs));
        Tensor want = x - tape.gradient(scale(total, 1.0 / static_cast<double>(k)), xv);
        CAPTURE(k);
        CHECK(max_abs_diff(got, want) <= 1e-12);
    }
}

TEST_CASE("pair seed table is symmetric") {
    auto s = make_pair_seeds(6, 3);
    REQUIRE(s.size() == 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j)
            if (i != j) CHECK(s[i][j] == s[j][i]);
    CHECK(s[0][1] != s[0][2]);
}

TEST_CASE("masked aggregation cancels") {
    for (std::size_t k = 2; k <= 8; ++k) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto d = random_deltas(k, {4, 5}, seed * 10 + k);
            auto masked = secure_masked_aggregate(d, make_pair_seeds(k, seed));
            CHECK(max_abs_diff(masked.sum, aggregate_deltas(d)) <= 1e-9);
            CHECK(masked.masked_uploads.size() == k);
        }
    }
    auto single = random_deltas(1, {2, 2}, 9);
    auto m1 = secure_masked_aggregate(single, make_pair_seeds(1, 0));
    CHECK(m1.sum == single[0].delta);
    CHECK(m1.masked_uploads[0] == single[0].delta);

    auto bad = make_pair_seeds(3, 1);
    bad[0][1] += 1;
    CHECK_THROWS(secure_masked_aggregate(random_deltas(3, {2, 2}, 1), bad));
}

TEST_CASE("masked uploads look unrelated to raw deltas") {
    // Per coordinate, correlate client 0's raw and masked value across trials.
    const std::size_t trials = 1000, coords = 64, k = 4;
    std::vector<std::vector<double>> raw(coords), up(coords);
    for (std::size_t t = 0; t < trials; ++t) {
        auto d = random_deltas(k, {8, 8}, 5000 + t);
        auto masked = secure_masked_aggregate(d, make_pair_seeds(k, t));
        for (std::size_t c = 0; c < coords; ++c) {
            raw[c].push_back(d[0].weight * d[0].delta[c]);
            up[c].push_back(masked.masked_uploads[0][c]);
        }
    }
    double worst = 0.0;
    for (std::size_t c = 0; c < coords; ++c) {
        double ma = 0, mb = 0;
        for (std::size_t t = 0; t < trials; ++t) ma += raw[c][t], mb += up[c][t];
        ma /= trials, mb /= trials;
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t t = 0; t < trials; ++t) {
            sab += (raw[c][t] - ma) * (up[c][t] - mb);
            saa += (raw[c][t] - ma) * (raw[c][t] - ma);
            sbb += (up[c][t] - mb) * (up[c][t] - mb);
        }
        worst = std::max(worst, std::abs(sab / std::sqrt(saa * sbb)));
    }
    CHECK(worst < 0.2);
}
