#include <cmath>
#include <filesystem>

#include "codream/model.hpp"
#include "codream/rng.hpp"
#include "doctest.h"

using namespace codream;

namespace {

// Loop implementation of a single-hidden-layer batchnorm classifier.
Tensor reference_logits(const Model& m, const Tensor& x, bool use_batch_stats) {
    const auto& l0 = m.layers()[0];
    const auto& l1 = m.layers()[1];
    const auto& bn = m.bn_states()[0];
    const std::size_t n = x.rows(), h = l0.weight.cols();
    std::vector<double> pre(n * h);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) {
            double s = l0.bias[j];
            for (std::size_t k = 0; k < x.cols(); ++k) s += x(i, k) * l0.weight(k, j);
            pre[i * h + j] = s;
        }
    Tensor out = Tensor::zeros({n, l1.weight.cols()});
    std::vector<double> act(n * h);
    for (std::size_t j = 0; j < h; ++j) {
        double mu = bn.running_mean[j], var = bn.running_var[j];
        if (use_batch_stats) {
            mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) mu += pre[i * h + j];
            mu /= static_cast<double>(n);
            var = 0.0;
            for (std::size_t i = 0; i < n; ++i) var += (pre[i * h + j] - mu) * (pre[i * h + j] - mu);
            var /= static_cast<double>(n);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double v = (pre[i * h + j] - mu) / std::sqrt(var + bn.epsilon) * bn.gamma[j] + bn.beta[j];
            act[i * h + j] = v > 0 ? v : 0.0;
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < out.cols(); ++c) {
            double s = l1.bias[c];
            for (std::size_t j = 0; j < h; ++j) s += act[i * h + j] * l1.weight(j, c);
            out(i, c) = s;
        }
    return out;
}

Model perturbed(const ArchitectureSpec& spec, std::uint64_t seed) {
    Model m = Model::build(spec, seed);
    Rng rng = make_rng(seed, 50);
    for (Tensor* p : m.parameters()) *p = *p + standard_normal(p->shape(), rng, 0.3);
    for (auto& bn : m.bn_states()) {
        bn.running_mean = standard_normal(bn.running_mean.shape(), rng);
        Tensor v = standard_normal(bn.running_var.shape(), rng);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.2 + v[i] * v[i];
        bn.running_var = v;
    }
    return m;
}

}  // namespace

TEST_CASE("architecture spec parsing and validation") {
    auto s = ArchitectureSpec::parse("32bn, 16", 8, 4, "a");
    REQUIRE(s.hidden.size() == 2);
    CHECK(s.hidden[0] == HiddenLayer{32, true});
    CHECK(s.hidden[1] == HiddenLayer{16, false});
    CHECK(s.layers_string() == "32bn,16");
    CHECK_THROWS_AS(ArchitectureSpec::parse("", 8, 4), ContractError);
    CHECK_THROWS_AS(ArchitectureSpec::parse("0", 8, 4), ContractError);
    CHECK_THROWS_AS(ArchitectureSpec::parse("8x", 8, 4), ContractError);
    CHECK_THROWS_AS(ArchitectureSpec::parse("8", 8, 1), ContractError);
    CHECK_THROWS_AS(ArchitectureSpec::parse("8", 0, 3), ContractError);
    CHECK(s.hash() != ArchitectureSpec::parse("32bn,16bn", 8, 4, "a").hash());
}

TEST_CASE("build is deterministic and shapes follow the spec") {
    auto spec = ArchitectureSpec::parse("16bn", 2, 3);
    Model a = Model::build(spec, 9), b = Model::build(spec, 9), c = Model::build(spec, 10);
    CHECK(parameter_vector(a) == parameter_vector(b));
    CHECK(parameter_vector(a) != parameter_vector(c));
    CHECK(a.layers()[0].weight.shape() == Shape{2, 16});
    CHECK(a.layers()[1].weight.shape() == Shape{16, 3});
    REQUIRE(a.bn_states().size() == 1);
    CHECK(a.bn_states()[0].running_mean == Tensor::zeros({1, 16}));
    CHECK(a.bn_states()[0].running_var == Tensor::filled({1, 16}, 1.0));
    CHECK(a.layers()[0].bias == Tensor::zeros({1, 16}));
}

TEST_CASE("initial pre-activation variance is near unit") {
    // He init keeps the second moment of relu features near that of the input.
    auto spec = ArchitectureSpec::parse("64,64", 32, 4);
    Model m = Model::build(spec, 3);
    Rng rng = make_rng(3, 1);
    Tensor x = standard_normal({1000, 32}, rng);
    const auto& w0 = m.layers()[0].weight;
    double second = 0.0;
    for (std::size_t i = 0; i < 1000; ++i)
        for (std::size_t j = 0; j < 64; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 32; ++k) s += x(i, k) * w0(k, j);
            second += s * s;
        }
    second /= 1000.0 * 64.0;
    // fan_in * 2 / fan_in = 2 before relu halves it back to one.
    CHECK(second / 2.0 > 0.5);
    CHECK(second / 2.0 < 2.0);
}

TEST_CASE("forward matches a loop reference in both modes") {
    auto spec = ArchitectureSpec::parse("6bn", 3, 4);
    Model m = perturbed(spec, 11);
    Rng rng = make_rng(11, 2);
    Tensor x = standard_normal({7, 3}, rng);

    CHECK(max_abs_diff(m.forward(x).logits, reference_logits(m, x, false)) < 1e-12);
    Model trained = m;
    auto r = trained.forward(x, Mode::train);
    CHECK(max_abs_diff(r.logits, reference_logits(m, x, true)) < 1e-12);

    // Running-stat update is the convex combination.
    const auto& before = m.bn_states()[0];
    const auto& after = trained.bn_states()[0];
    const double mom = before.momentum;
    for (std::size_t j = 0; j < 6; ++j) {
        CHECK(std::abs(after.running_mean[j] - ((1 - mom) * before.running_mean[j] + mom * r.batch_stats[0].mean[j])) <
              1e-12);
        CHECK(std::abs(after.running_var[j] - ((1 - mom) * before.running_var[j] + mom * r.batch_stats[0].var[j])) <
              1e-12);
    }
}

TEST_CASE("eval forward is pure and reports batch statistics") {
    auto spec = ArchitectureSpec::parse("5bn,4bn", 3, 3);
    Model m = perturbed(spec, 2);
    Rng rng = make_rng(2, 3);
    Tensor x = standard_normal({6, 3}, rng);
    Tensor before = parameter_vector(m);
    auto r1 = m.forward(x, Mode::eval);
    auto r2 = m.forward(x, Mode::eval);
    CHECK(r1.logits == r2.logits);
    CHECK(parameter_vector(m) == before);
    CHECK(m.bn_states()[0].running_mean == perturbed(spec, 2).bn_states()[0].running_mean);
    REQUIRE(r1.batch_stats.size() == 2);
    CHECK(r1.batch_stats[0].mean.shape() == Shape{1, 5});
}

TEST_CASE("batch equal to running statistics normalizes to gamma, beta") {
    auto spec = ArchitectureSpec::parse("4bn", 2, 2);
    Model m = perturbed(spec, 4);
    Rng rng = make_rng(4, 1);
    Tensor x = standard_normal({8, 2}, rng);
    auto stats = m.forward(x).batch_stats;
    m.bn_states()[0].running_mean = stats[0].mean;
    m.bn_states()[0].running_var = stats[0].var;
    Model train_copy = m;
    CHECK(max_abs_diff(m.forward(x).logits, train_copy.forward(x, Mode::train).logits) < 1e-12);
}

TEST_CASE("train mode rejects single-row batches with batchnorm") {
    Model bn = Model::build(ArchitectureSpec::parse("4bn", 2, 2), 1);
    Model plain = Model::build(ArchitectureSpec::parse("4", 2, 2), 1);
    Tensor one = Tensor::matrix({{0.1, 0.2}});
    CHECK_THROWS_AS(bn.forward(one, Mode::train), ContractError);
    CHECK_NOTHROW(plain.forward(one, Mode::train));
    CHECK_NOTHROW(bn.forward(one, Mode::eval));
    CHECK_THROWS_AS(bn.forward(Tensor::matrix({{1, 2, 3}})), DimensionError);
}

TEST_CASE("input gradient") {
    auto spec = ArchitectureSpec::parse("5bn,4", 3, 3);
    Model m = perturbed(spec, 6);
    Rng rng = make_rng(6, 1);
    Tensor x = standard_normal({4, 3}, rng);
    TraceLoss entropy = [](Tape&, const ForwardTrace& tr) {
        Var lsm = log_softmax(tr.logits);
        return scale(sum(mul(exp(lsm), lsm)), -0.25);
    };
    Tensor g = input_gradient(m, x, entropy);

    // Finite differences through the frozen (eval-mode) model.
    auto fd = finite_difference_check([&](Tape& t, Var xv) { return entropy(t, m.trace(t, xv, Mode::eval)); }, x);
    CHECK(fd.max_rel_error <= 1e-4);

    TraceLoss scaled = [&](Tape& t, const ForwardTrace& tr) { return scale(entropy(t, tr), 3.0); };
    CHECK(max_abs_diff(input_gradient(m, x, scaled), 3.0 * g) < 1e-12);

    Model flat = m;
    flat.layers().back().weight = Tensor::zeros(flat.layers().back().weight.shape());
    CHECK(input_gradient(flat, x, entropy) == Tensor::zeros({4, 3}));
    CHECK(parameter_vector(m) == parameter_vector(perturbed(spec, 6)));
}

TEST_CASE("parameter vector round trip") {
    auto spec = ArchitectureSpec::parse("8bn", 2, 3);
    Model a = perturbed(spec, 1), b = perturbed(spec, 2);
    Tensor va = parameter_vector(a);
    CHECK(va.size() == 67);
    CHECK(a.parameter_count() == 67);
    // Order: weight, bias, gamma, beta, then the output layer.
    CHECK(va[0] == a.layers()[0].weight[0]);
    CHECK(va[16] == a.layers()[0].bias[0]);
    CHECK(va[24] == a.bn_states()[0].gamma[0]);
    CHECK(va[32] == a.bn_states()[0].beta[0]);
    CHECK(va[40] == a.layers()[1].weight[0]);

    Model round = load_parameter_vector(b, va);
    round.bn_states() = a.bn_states();
    Rng rng = make_rng(1, 1);
    Tensor x = standard_normal({5, 2}, rng);
    CHECK(round.forward(x).logits == a.forward(x).logits);

    Tensor vb = parameter_vector(b);
    Tensor avg = 0.5 * (va + vb);
    Model mid = load_parameter_vector(a, avg);
    Tensor vm = parameter_vector(mid);
    for (std::size_t i = 0; i < vm.size(); ++i) CHECK(std::abs(2 * (vm[i] - va[i]) - (vb[i] - va[i])) < 1e-12);
    CHECK_THROWS_AS(load_parameter_vector(a, Tensor::zeros({66})), DimensionError);
}

TEST_CASE("checkpoint round trip rejects foreign architectures") {
    auto spec = ArchitectureSpec::parse("8bn", 2, 3);
    Model a = perturbed(spec, 5);
    auto path = std::filesystem::temp_directory_path() / "codream_test_ckpt.bin";
    save_parameters(path, a);
    Model back = load_parameters(path, Model::build(spec, 99));
    CHECK(parameter_vector(back) == parameter_vector(a));
    CHECK_THROWS_AS(load_parameters(path, Model::build(ArchitectureSpec::parse("9bn", 2, 3), 1)), ContractError);
    std::filesystem::remove(path);
}
