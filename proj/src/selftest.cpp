#include "codream/selftest.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "codream/acquisition.hpp"
#include "codream/aggregation.hpp"
#include "codream/data.hpp"
#include "codream/extraction.hpp"
#include "codream/model.hpp"

namespace codream {

namespace {

struct Check {
    std::string name;
    std::function<std::string()> body;  // empty string on success
};

std::string fail_if(bool bad, const std::string& what, double value) {
    if (!bad) return {};
    std::ostringstream s;
    s.precision(17);
    s << what << " (got " << value << ")";
    return s.str();
}

Model small_model(std::uint64_t seed, std::size_t d = 3, std::size_t c = 3) {
    Model m = Model::build(ArchitectureSpec::parse("5bn,4", d, c), seed);
    // Non-trivial running statistics so R_bn is informative.
    Rng rng = make_rng(seed, 7);
    for (auto& bn : m.bn_states()) {
        bn.running_mean = standard_normal(bn.running_mean.shape(), rng, 0.5);
        auto v = standard_normal(bn.running_var.shape(), rng, 0.3);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 + v[i] * v[i];
        bn.running_var = v;
    }
    return m;
}

std::string fd_check(const ScalarFn& f, std::size_t trials, std::size_t rows, std::size_t cols) {
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = make_rng(t, 11);
        auto rep = finite_difference_check(f, standard_normal({rows, cols}, rng));
        worst = std::max(worst, rep.max_rel_error);
    }
    return fail_if(worst > 1e-4, "finite-difference mismatch", worst);
}

std::vector<Check> checks() {
    std::vector<Check> out;

    out.push_back({"autodiff_gradients", [] {
                       Rng rng = make_rng(1, 0);
                       Tensor w = standard_normal({4, 3}, rng);
                       return fd_check(
                           [w](Tape& tape, Var x) {
                               Var h = matmul(x, tape.constant(w));
                               return mean(square(log_softmax(h)));
                           },
                           10, 5, 4);
                   }});

    out.push_back({"entropy_of_outputs", [] {
                       Tape tape;
                       double h = entropy_of_outputs(tape.leaf(Tensor::filled({3, 4}, 0.7))).value().item();
                       if (auto e = fail_if(std::abs(h - std::log(4.0)) > 1e-9, "uniform entropy != ln 4", h); !e.empty())
                           return e;
                       return fd_check([](Tape&, Var x) { return entropy_of_outputs(x); }, 10, 4, 3);
                   }});

    out.push_back({"bn_regularizer", [] {
                       Model m = small_model(3);
                       Rng rng = make_rng(3, 1);
                       Tensor x = standard_normal({6, 3}, rng);
                       // Running stats set to the batch stats give zero.
                       Model matched = m;
                       auto stats = matched.forward(x).batch_stats;
                       for (std::size_t l = 0; l < stats.size(); ++l) {
                           matched.bn_states()[l].running_mean = stats[l].mean;
                           auto v = stats[l].var;
                           matched.bn_states()[l].running_var = v;
                       }
                       Tape tape;
                       auto tr = matched.trace(tape, tape.leaf(x), Mode::eval);
                       double r = bn_regularizer(tr.batch_stats, matched.bn_states()).value().item();
                       if (auto e = fail_if(std::abs(r) > 1e-9, "matching statistics not zero", r); !e.empty()) return e;
                       return fd_check(
                           [m](Tape& t, Var xv) {
                               auto tr2 = m.trace(t, xv, Mode::eval);
                               return bn_regularizer(tr2.batch_stats, m.bn_states());
                           },
                           10, 6, 3);
                   }});

    out.push_back({"adv_regularizer", [] {
                       Rng rng = make_rng(5, 0);
                       for (int t = 0; t < 5; ++t) {
                           Tensor a = standard_normal({4, 3}, rng), b = standard_normal({4, 3}, rng);
                           Tape tape;
                           Var va = tape.leaf(a), vb = tape.leaf(b);
                           double got = adv_regularizer(va, vb).value().item();
                           double want = -mean_jsd(softmax(va).value(), softmax(vb).value());
                           if (auto e = fail_if(std::abs(got - want) > 1e-12, "value != -JSD(teacher || student)", got);
                               !e.empty())
                               return e;
                       }
                       Tensor p = Tensor::matrix({{1.0, 0.0}}), q = Tensor::matrix({{0.0, 1.0}});
                       double d = mean_jsd(p, q);
                       if (auto e = fail_if(std::abs(d - std::log(2.0)) > 1e-9, "JSD of disjoint rows != ln 2", d);
                           !e.empty())
                           return e;
                       Tensor other = standard_normal({4, 3}, rng);
                       return fd_check([other](Tape& tape, Var x) { return adv_regularizer(x, tape.constant(other)); },
                                       10, 4, 3);
                   }});

    out.push_back({"kd_loss", [] {
                       Tape tape;
                       double v = kd_loss(tape.leaf(Tensor::matrix({{0.3, 0.3}})), Tensor::matrix({{1.0, 0.0}}))
                                      .value()
                                      .item();
                       if (auto e = fail_if(std::abs(v - std::log(2.0)) > 1e-9, "KL((1,0) || uniform) != ln 2", v);
                           !e.empty())
                           return e;
                       Tensor z = Tensor::matrix({{0.2, -1.0, 0.5}});
                       Var zv = tape.leaf(z);
                       double fixed = kd_loss(zv, softmax(zv).value()).value().item();
                       if (auto e = fail_if(std::abs(fixed) > 1e-9, "KL at the fixed point != 0", fixed); !e.empty())
                           return e;
                       Rng rng = make_rng(6, 0);
                       Tensor target = softmax(tape.leaf(standard_normal({4, 3}, rng))).value();
                       return fd_check([target](Tape&, Var x) { return kd_loss(x, target, 2.0); }, 10, 4, 3);
                   }});

    out.push_back({"aggregation_equivalence", [] {
                       const std::size_t k = 3;
                       std::vector<Model> models;
                       for (std::size_t i = 0; i < k; ++i) models.push_back(small_model(20 + i));
                       Rng rng = make_rng(8, 0);
                       Tensor x = standard_normal({5, 3}, rng);
                       ExtractionCoefficients coeffs{1.0, 1.0, 0.0, 0.0};
                       LocalDreamOptions opt{1, 0.1, DreamOptimizer::sgd, AdaptiveScheme::none, coeffs};
                       std::vector<PseudoGradient> deltas;
                       for (std::size_t i = 0; i < k; ++i) {
                           DreamBatch b;
                           b.x = x;
                           deltas.push_back({i, local_dream_update(models[i], nullptr, b, opt).pseudo_gradient,
                                             1.0 / static_cast<double>(k)});
                       }
                       ServerOptimizerState st;
                       Tensor got = server_apply(x, aggregate_deltas(deltas), st);
                       Tape tape;
                       Var xv = tape.leaf(x);
                       Var total = extraction_loss(tape, models[0], nullptr, xv, coeffs);
                       for (std::size_t i = 1; i < k; ++i) total = add(total, extraction_loss(tape, models[i], nullptr, xv, coeffs));
                       Tensor g = tape.gradient(scale(total, 1.0 / static_cast<double>(k)), xv);
                       Tensor want = x - 0.1 * g;
                       return fail_if(max_abs_diff(got, want) > 1e-12, "aggregated step != centralized step",
                                      max_abs_diff(got, want));
                   }});

    out.push_back({"mask_cancellation", [] {
                       double worst = 0.0;
                       for (std::size_t k = 2; k <= 8; ++k) {
                           Rng rng = make_rng(k, 9);
                           std::vector<PseudoGradient> deltas;
                           for (std::size_t i = 0; i < k; ++i) {
                               deltas.push_back({i, standard_normal({4, 3}, rng), 1.0 / static_cast<double>(k)});
                           }
                           auto masked = secure_masked_aggregate(deltas, make_pair_seeds(k, k));
                           worst = std::max(worst, max_abs_diff(masked.sum, aggregate_deltas(deltas)));
                       }
                       return fail_if(worst > 1e-9, "masked sum != plain sum", worst);
                   }});

    out.push_back({"partition_invariants", [] {
                       for (int t = 0; t < 50; ++t) {
                           const std::size_t n = 60, k = 2 + static_cast<std::size_t>(t % 7);
                           std::vector<int> labels(n);
                           for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 4);
                           const double alphas[] = {0.05, 0.1, 1.0, 10.0, kIidAlpha};
                           auto plan = dirichlet_partition(labels, k, alphas[t % 5], static_cast<std::uint64_t>(t));
                           std::set<std::size_t> seen;
                           std::size_t total = 0;
                           for (const auto& c : plan.clients) {
                               if (c.empty()) return std::string("empty client");
                               total += c.size();
                               seen.insert(c.begin(), c.end());
                           }
                           if (total != n || seen.size() != n) return std::string("partition not disjoint and complete");
                       }
                       return std::string();
                   }});

    out.push_back({"fed_adam_first_step", [] {
                       ServerOptimizerState st;
                       st.scheme = ServerScheme::fed_adam;
                       st.global_lr = 0.05;
                       Tensor x = Tensor::zeros({2, 2});
                       Tensor next = server_apply(x, Tensor::filled({2, 2}, 0.3), st);
                       // First bias-corrected step: lr * g / (|g| + tau).
                       double want = 0.05 * 0.3 / (0.3 + st.tau);
                       return fail_if(std::abs(next[0] - want) > 1e-12, "first FedAdam step", next[0]);
                   }});

    return out;
}

}  // namespace

std::vector<PropertyResult> run_selftest() {
    std::vector<PropertyResult> results;
    for (const auto& c : checks()) {
        PropertyResult r{c.name, false, {}};
        try {
            r.detail = c.body();
            r.passed = r.detail.empty();
        } catch (const std::exception& e) {
            r.detail = std::string("threw: ") + e.what();
        }
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace codream
