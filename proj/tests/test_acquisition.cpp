#include <cmath>
#include <limits>

#include "codream/acquisition.hpp"
#include "codream/data.hpp"
#include "codream/extraction.hpp"
#include "doctest.h"

using namespace codream;

namespace {

Tensor random_simplex(std::size_t n, std::size_t c, Rng& rng) {
    Tape tape;
    return softmax(tape.leaf(standard_normal({n, c}, rng, 2.0))).value();
}

// Direct KL(p || q) per row, averaged.
double direct_kl(const Tensor& p, const Tensor& q) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t j = 0; j < p.cols(); ++j)
            if (p(i, j) > 0) total += p(i, j) * std::log(p(i, j) / q(i, j));
    return total / static_cast<double>(p.rows());
}

Model teacher_on(const Dataset& train, std::uint64_t seed) {
    Rng rng = make_rng(seed, 1);
    return train_on_local(Model::build(ArchitectureSpec::parse("16bn,16bn", train.dims(), train.num_classes), seed),
                          train, CeOptions{15, 0.05, 0.9, 32}, rng);
}

SoftLabelSet teacher_dreams(const Model& teacher, std::size_t batches, std::size_t n, std::uint64_t seed) {
    SoftLabelSet set;
    Rng rng = make_rng(seed, 2);
    for (std::size_t b = 0; b < batches; ++b) {
        DreamBatch batch = DreamBatch::fresh(n, teacher.spec().input_dim, rng, 0);
        auto r = local_dream_update(teacher, nullptr, batch,
                                    {10, 0.05, DreamOptimizer::adam, AdaptiveScheme::none, {1, 1, 0, 0}});
        set.add(r.batch.x, teacher.predict_proba(r.batch.x));
    }
    return set;
}

}  // namespace

TEST_CASE("soft label aggregation") {
    Tensor a = Tensor::matrix({{1, 0}}), b = Tensor::matrix({{0, 1}});
    std::vector<Tensor> two{a, b};
    std::vector<double> half{0.5, 0.5};
    CHECK(aggregate_soft_labels(two, half) == Tensor::matrix({{0.5, 0.5}}));

    Rng rng = make_rng(1);
    Tensor p = random_simplex(5, 4, rng);
    std::vector<Tensor> same{p, p, p};
    std::vector<double> w3{0.2, 0.3, 0.5};
    CHECK(max_abs_diff(aggregate_soft_labels(same, w3), p) < 1e-15);

    for (int t = 0; t < 20; ++t) {
        std::vector<Tensor> probs{random_simplex(6, 3, rng), random_simplex(6, 3, rng), random_simplex(6, 3, rng)};
        Tensor out = aggregate_soft_labels(probs, w3);
        for (std::size_t i = 0; i < out.rows(); ++i) {
            double s = 0;
            for (std::size_t j = 0; j < out.cols(); ++j) s += out(i, j);
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
        std::vector<Tensor> rev{probs[2], probs[1], probs[0]};
        std::vector<double> wrev{0.5, 0.3, 0.2};
        CHECK(max_abs_diff(aggregate_soft_labels(rev, wrev), out) < 1e-15);
    }
    std::vector<Tensor> off{Tensor::matrix({{0.5, 0.6}})};
    std::vector<double> one{1.0};
    CHECK_THROWS(aggregate_soft_labels(off, one));
}

TEST_CASE("kd loss values") {
    Tape tape;
    CHECK(kd_loss(tape.leaf(Tensor::matrix({{2, 2}})), Tensor::matrix({{1, 0}})).value().item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Tensor z = Tensor::matrix({{0.4, -1.0, 2.0}, {0, 0, 0}});
    CHECK(std::abs(kd_loss(tape.leaf(z), softmax(tape.leaf(z)).value()).value().item()) < 1e-12);

    Rng rng = make_rng(2);
    for (int t = 0; t < 20; ++t) {
        Tensor logits = standard_normal({4, 3}, rng, 2.0);
        Tensor target = random_simplex(4, 3, rng);
        const double tau = 0.5 + t * 0.1;
        double got = kd_loss(tape.leaf(logits), target, tau).value().item();
        Tensor q = softmax(scale(tape.leaf(logits), 1.0 / tau)).value();
        CHECK(got == doctest::Approx(tau * tau * direct_kl(target, q)).epsilon(1e-10));
        CHECK(got >= 0.0);
        CHECK(mean_kl(target, q) == doctest::Approx(direct_kl(target, q)).epsilon(1e-12));
    }
    for (double tau : {1.0, 2.0}) {
        Tensor target = random_simplex(4, 3, rng);
        double worst = 0.0;
        for (std::uint64_t t = 0; t < 20; ++t) {
            Rng r = make_rng(t, 5);
            auto rep = finite_difference_check([&](Tape&, Var x) { return kd_loss(x, target, tau); },
                                               standard_normal({4, 3}, r));
            worst = std::max(worst, rep.max_rel_error);
        }
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("soft label set rejects off-simplex rows") {
    SoftLabelSet set;
    CHECK_THROWS(set.add(Tensor::zeros({1, 2}), Tensor::matrix({{0.5, 0.6}})));
    CHECK_THROWS(set.add(Tensor::zeros({2, 2}), Tensor::matrix({{0.5, 0.5}})));
    set.add(Tensor::zeros({1, 2}), Tensor::matrix({{0.5, 0.5}}));
    CHECK(set.rows() == 1);

    DreamBuffer buf(4);
    buf.push(Tensor::zeros({3, 2}), Tensor::filled({3, 2}, 0.5), 0);
    buf.push(Tensor::zeros({2, 2}), Tensor::filled({2, 2}, 0.5), 1);
    CHECK(SoftLabelSet::from_buffer(buf).rows() == 5);
}

TEST_CASE("sgd momentum update") {
    Model m = Model::build(ArchitectureSpec::parse("2", 2, 2), 1);
    Model start = m;
    std::vector<Tensor> grads;
    for (const Tensor* p : m.parameters()) grads.push_back(Tensor::filled(p->shape(), 1.0));
    SgdMomentum opt(0.1, 0.5);
    opt.step(m, grads);
    opt.step(m, grads);
    // v1 = g, v2 = 1.5 g: total move 0.25 per entry.
    Tensor diff = parameter_vector(start) - parameter_vector(m);
    for (std::size_t i = 0; i < diff.size(); ++i) CHECK(diff[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("training on dreams") {
    Dataset train = gen_gaussian_mixture(300, 3, 4, 4.0, 3);
    Model teacher = teacher_on(train, 3);
    SoftLabelSet dreams = teacher_dreams(teacher, 5, 40, 3);
    Rng rng = make_rng(3, 9);

    SUBCASE("teacher copy is a fixed point") {
        TrainTrace tr;
        Model same = train_on_dreams(teacher, dreams, KdOptions{5, 0.05, 0.9, 1.0, Mode::eval}, rng, &tr);
        CHECK(tr.initial_loss <= 1e-6);
        CHECK(tr.final_loss <= 1e-6);
        for (double l : tr.epoch_loss) CHECK(l <= 1e-6);
    }
    SUBCASE("zero learning rate is the identity") {
        Model same = train_on_dreams(teacher, dreams, KdOptions{3, 0.0, 0.9, 1.0, Mode::eval}, rng);
        CHECK(parameter_vector(same) == parameter_vector(teacher));
        Model same_ce = train_on_local(teacher, train, CeOptions{2, 0.0, 0.9, 32}, rng);
        CHECK(parameter_vector(same_ce) == parameter_vector(teacher));
        Model none = train_on_local(teacher, train, CeOptions{0, 0.05, 0.9, 32}, rng);
        CHECK(parameter_vector(none) == parameter_vector(teacher));
        CHECK(none.bn_states()[0].running_mean == teacher.bn_states()[0].running_mean);
    }
    SUBCASE("fresh student fits 200 teacher-labeled dreams") {
        Model student = Model::build(teacher.spec(), 77);
        TrainTrace tr;
        student = train_on_dreams(student, dreams, KdOptions{50, 0.05, 0.9, 1.0, Mode::eval}, rng, &tr);
        CHECK(dreams.rows() == 200);
        CHECK(tr.final_loss <= 0.1);
        CHECK(tr.final_loss <= tr.initial_loss);
    }
    CHECK_THROWS(train_on_dreams(teacher, SoftLabelSet{}, KdOptions{}, rng));
}

TEST_CASE("distilled student stays close to the teacher") {
    Dataset train = gen_gaussian_mixture(480, 3, 16, 4.0, 5);
    Dataset test = gen_gaussian_mixture(1200, 3, 16, 4.0, 6);
    Model teacher = teacher_on(train, 5);
    const double t_acc = accuracy(teacher, test);
    SoftLabelSet dreams = teacher_dreams(teacher, 10, 32, 5);
    Rng rng = make_rng(5, 9);
    Model student =
        train_on_dreams(Model::build(teacher.spec(), 55), dreams, KdOptions{50, 0.05, 0.9, 1.0, Mode::eval}, rng);
    CHECK(t_acc >= 0.9);
    CHECK(accuracy(student, test) >= t_acc - 0.15);
}

TEST_CASE("local cross-entropy training") {
    // Two well separated blobs.
    Dataset toy = gen_gaussian_mixture(40, 2, 2, 10.0, 8);
    Rng rng = make_rng(8);
    Model m = Model::build(ArchitectureSpec::parse("8bn", 2, 2), 8);
    bool perfect = false;
    for (int e = 0; e < 200 && !perfect; ++e) {
        m = train_on_local(m, toy, CeOptions{1, 0.05, 0.9, 8}, rng);
        perfect = accuracy(m, toy) == 1.0;
    }
    CHECK(perfect);

    Dataset ds = gen_gaussian_mixture(240, 3, 4, 3.0, 9);
    TrainTrace tr;
    Model slow = train_on_local(Model::build(ArchitectureSpec::parse("16bn", 4, 3), 9), ds,
                                CeOptions{40, 0.01, 0.9, 240}, rng, &tr);
    std::size_t rises = 0;
    for (std::size_t i = 1; i < tr.epoch_loss.size(); ++i) rises += tr.epoch_loss[i] > tr.epoch_loss[i - 1];
    CHECK(static_cast<double>(rises) <= 0.05 * static_cast<double>(tr.epoch_loss.size()));
    CHECK(tr.final_loss < tr.initial_loss);
    Dataset empty;
    CHECK_THROWS(train_on_local(slow, empty, CeOptions{}, rng));
}

TEST_CASE("divergence guard") {
    GuardState s;
    std::vector<double> up{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    CHECK(divergence_guard(up, 3, 0.1, s));

    GuardState d;
    std::vector<double> drop{0.5, 0.8, 0.6, 0.6, 0.6};
    CHECK_FALSE(divergence_guard(drop, 3, 0.1, d));
    CHECK(d.stopped);
    // Sticky even after recovery.
    std::vector<double> recovered{0.5, 0.8, 0.6, 0.6, 0.6, 0.9, 0.9, 0.9};
    CHECK_FALSE(divergence_guard(recovered, 3, 0.1, d));

    GuardState off;
    std::vector<double> crash{0.9, 0.0, 0.0, 0.0};
    CHECK(divergence_guard(crash, 3, std::numeric_limits<double>::infinity(), off));
    CHECK_THROWS(divergence_guard(crash, 0, 0.1, off));
}

TEST_CASE("avgkd targets") {
    std::vector<int> labels{0, 1};
    Tensor oh = one_hot(labels, 2);
    CHECK(oh == Tensor::matrix({{1, 0}, {0, 1}}));
    std::vector<Tensor> peer{Tensor::matrix({{0.3, 0.7}, {0.5, 0.5}})};
    Tensor t = avgkd_targets(oh, peer);
    CHECK(t(0, 0) == doctest::Approx(0.65));
    CHECK(t(0, 1) == doctest::Approx(0.35));
    CHECK(t(1, 1) == doctest::Approx(0.75));
    std::vector<int> bad{2};
    CHECK_THROWS(one_hot(bad, 2));
}
