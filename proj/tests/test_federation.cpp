#include <cmath>
#include <set>

#include "codream/federation.hpp"
#include "doctest.h"

using namespace codream;

namespace {

ExperimentSpec small_spec(std::uint64_t seed = 1) {
    ExperimentSpec s;
    s.data.train_size = 160;
    s.data.test_size = 300;
    s.data.classes = 3;
    s.data.dims = 8;
    s.models.client_layers = {"16bn"};
    s.models.server_layers = "16bn";
    s.round.epochs = 2;
    s.round.rounds = 2;
    s.round.local_steps = 2;
    s.round.warmup_epochs = 2;
    s.round.dream_batch = 16;
    s.round.seed = seed;
    return s;
}

std::uint64_t bytes_for(const MetricsRecord& rec, const std::string& payload, Direction dir) {
    std::uint64_t total = 0;
    for (const auto& r : rec.ledger.records())
        if (r.payload == payload && r.direction == dir) total += r.bytes;
    return total;
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("config validation names the field") {
    ExperimentSpec s = small_spec();
    s.round.rounds = 0;
    try {
        s.validate();
        FAIL("accepted zero rounds");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).rfind("rounds", 0) == 0);
    }
    s = small_spec();
    s.round.adaptive = AdaptiveScheme::none;
    CHECK_THROWS_AS(s.validate(), ContractError);  // w_adv still set
    s.round.coeffs.w_adv = 0.0;
    CHECK_NOTHROW(s.validate());
    CHECK(parse_method("fedavg") == Method::fedavg);
    CHECK_THROWS(parse_method("scaffold"));
}

TEST_CASE("warmup") {
    ExperimentSpec s = small_spec();
    s.data.alpha = kIidAlpha;
    s.data.train_size = 480;
    s.data.separation = 4.0;
    FederationState st = make_federation(s, 3);
    std::vector<std::uint64_t> before;
    for (const auto& c : st.clients) before.push_back(c.fingerprint());
    run_warmup(st, 0, s.round.ce);
    for (std::size_t k = 0; k < st.clients.size(); ++k) CHECK(st.clients[k].fingerprint() == before[k]);
    run_warmup(st, 20, s.round.ce);
    for (const auto& c : st.clients) CHECK(c.own_accuracy() >= 0.7);

    s.data.alpha = 0.1;
    FederationState skew = make_federation(s, 3);
    run_warmup(skew, 5, s.round.ce);
    std::set<std::uint64_t> prints;
    for (const auto& c : skew.clients) prints.insert(c.fingerprint());
    CHECK(prints.size() == skew.clients.size());
}

TEST_CASE("one aggregation round matches the centralized ensemble step") {
    ExperimentSpec s = small_spec(5);
    s.models.client_layers = {"16bn", "8bn,8bn", "12bn", "6bn,6bn,6bn"};
    s.round.rounds = 1;
    s.round.local_steps = 1;
    s.round.local_lr = 0.2;
    s.round.local_optimizer = DreamOptimizer::sgd;
    s.round.adaptive = AdaptiveScheme::none;
    s.round.coeffs = {1, 1, 0, 0};
    s.round.weighting = WeightScheme::uniform;
    FederationState st = make_federation(s, 5);

    // Same models the federation built; no warmup so they are untouched.
    std::vector<Model> models;
    for (std::size_t k = 0; k < 4; ++k)
        models.push_back(Model::build(ArchitectureSpec::parse(s.models.client_layers[k], 8, 3), mix_seed(5, 400 + k)));
    Rng dream_rng = make_rng(5, 1000);
    Tensor x0 = standard_normal({16, 8}, dream_rng);

    run_codream_round(st, s.round);

    Tape tape;
    Var xv = tape.leaf(x0);
    Var total = extraction_loss(tape, models[0], nullptr, xv, s.round.coeffs);
    for (std::size_t k = 1; k < 4; ++k) total = add(total, extraction_loss(tape, models[k], nullptr, xv, s.round.coeffs));
    Tensor want = x0 - 0.2 * tape.gradient(scale(total, 0.25), xv);
    CHECK(max_abs_diff(st.last_dreams, want) <= 1e-12);
}

TEST_CASE("degenerate and heterogeneous federations complete") {
    ExperimentSpec one = small_spec(2);
    one.round.clients = 1;
    MetricsRecord r1 = run_codream(one);
    CHECK(r1.final_metric("0", "accuracy").has_value());
    CHECK(r1.final_metric("server", "accuracy").has_value());

    ExperimentSpec zoo = small_spec(2);
    zoo.models.client_layers = {"16bn", "32bn,16bn", "8bn,8bn,8bn", "64"};
    MetricsRecord rz = run_codream(zoo);
    CHECK(rz.architecture == "16bn|32bn,16bn|8bn,8bn,8bn|64");
    for (const char* id : {"0", "1", "2", "3"}) CHECK(rz.final_metric(id, "accuracy").has_value());

    CHECK_THROWS_AS(run_baseline(Method::fedavg, zoo), ContractError);
    CHECK_NOTHROW(run_baseline(Method::avgkd, zoo));
}

TEST_CASE("adaptive teaching changes the dreams") {
    ExperimentSpec plain = small_spec(4);
    plain.round.adaptive = AdaptiveScheme::none;
    plain.round.coeffs.w_adv = 0.0;
    ExperimentSpec jsd = small_spec(4);
    ExperimentSpec minmax = plain;
    minmax.round.adaptive = AdaptiveScheme::minmax;

    auto dreams = [](const ExperimentSpec& s) {
        FederationState st = make_federation(s, 4);
        run_warmup(st, s.round.warmup_epochs, s.round.ce);
        run_codream_round(st, s.round);
        run_codream_round(st, s.round);
        return st.last_dreams;
    };
    Tensor a = dreams(plain), b = dreams(jsd), c = dreams(minmax);
    CHECK(max_abs_diff(a, b) > 0.0);
    CHECK(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("runs are deterministic") {
    ExperimentSpec s = small_spec(9);
    for (Method m : {Method::codream, Method::centralized, Method::independent, Method::fedavg, Method::avgkd}) {
        s.method = m;
        MetricsRecord a = run_method(s), b = run_method(s);
        CAPTURE(to_string(m));
        REQUIRE(a.rows.size() == b.rows.size());
        bool same = true;
        for (std::size_t i = 0; i < a.rows.size(); ++i) same = same && a.rows[i].value == b.rows[i].value;
        CHECK(same);
        CHECK(a.ledger.total_bytes() == b.ledger.total_bytes());
    }
}

TEST_CASE("codream communication follows the counting formula") {
    ExperimentSpec s = small_spec(1);
    s.data.dims = 64;
    s.round.clients = 1;
    s.round.dream_batch = 32;
    s.round.rounds = 10;
    s.round.epochs = 1;
    s.round.adaptive = AdaptiveScheme::none;
    s.round.coeffs.w_adv = 0.0;
    MetricsRecord rec = run_codream(s);
    CHECK(bytes_for(rec, "pseudo_gradient", Direction::up) == 163840);
    CHECK(bytes_for(rec, "dreams", Direction::down) == 163840);
    CHECK(rec.ledger.rounds("codream") == 10);
    // Labels: one upload and one broadcast of n x C, plus the final dreams.
    CHECK(bytes_for(rec, "soft_labels", Direction::up) == 32 * 3 * 8);
    CHECK(bytes_for(rec, "final_dreams", Direction::down) == 32 * 64 * 8);
}

TEST_CASE("codream bytes ignore client architecture, fedavg bytes do not") {
    ExperimentSpec tiny = small_spec(1), huge = small_spec(1);
    tiny.models.client_layers = {"4"};
    huge.models.client_layers = {"400bn,400bn"};
    tiny.round.epochs = huge.round.epochs = 1;
    const Model mt = Model::build(ArchitectureSpec::parse("4", 8, 3), 1);
    const Model mh = Model::build(ArchitectureSpec::parse("400bn,400bn", 8, 3), 1);
    REQUIRE(mh.parameter_count() >= 100 * mt.parameter_count());

    auto row = [](const MetricsRecord& r, const std::string& m) {
        for (const auto& c : comm_report(r.ledger, r.architecture, r.clients))
            if (c.method == m) return c;
        FAIL("no row for " << m);
        return CommRow{};
    };
    CommRow ct = row(run_codream(tiny), "codream"), ch = row(run_codream(huge), "codream");
    CHECK(ct.bytes_per_round == ch.bytes_per_round);
    CHECK(ct.total_bytes == ch.total_bytes);

    tiny.method = huge.method = Method::fedavg;
    CommRow ft = row(run_method(tiny), "fedavg"), fh = row(run_method(huge), "fedavg");
    CHECK(ft.bytes_per_round_per_client == 2.0 * communicated_size(mt) * 8);
    CHECK(fh.bytes_per_round_per_client == 2.0 * communicated_size(mh) * 8);
    CHECK(communicated_size(mt) == mt.parameter_count());

    CHECK(comm_report(CommLedger{}, "x", 4).empty());
    CommLedger empty;
    CHECK(empty.total_bytes() == 0);
}

TEST_CASE("avgkd exchanges every model with every peer") {
    ExperimentSpec s = small_spec(3);
    s.method = Method::avgkd;
    s.round.epochs = 3;
    MetricsRecord rec = run_method(s);
    const Model m = Model::build(ArchitectureSpec::parse("16bn", 8, 3), 1);
    CHECK(bytes_for(rec, "peer_model", Direction::down) == 3ull * 4 * 3 * communicated_size(m) * 8);
    CHECK(rec.ledger.rounds("avgkd") == 3);
}

TEST_CASE("averaging identical models returns that model") {
    Model m = Model::build(ArchitectureSpec::parse("8bn", 3, 2), 4);
    m.bn_states()[0].running_mean = Tensor::filled({1, 8}, 0.25);
    std::vector<Model> same{m, m, m};
    std::vector<double> w{0.2, 0.3, 0.5};
    Model avg = average_models(same, w);
    CHECK(max_abs_diff(parameter_vector(avg), parameter_vector(m)) <= 1e-15);
    CHECK(max_abs_diff(avg.bn_states()[0].running_mean, m.bn_states()[0].running_mean) <= 1e-15);
    std::vector<Model> mixed{m, Model::build(ArchitectureSpec::parse("9bn", 3, 2), 4)};
    std::vector<double> w2{0.5, 0.5};
    CHECK_THROWS_AS(average_models(mixed, w2), ContractError);
}

TEST_CASE("centralized beats independent on iid shards") {
    std::vector<double> cen, ind;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ExperimentSpec s = small_spec(seed);
        s.data.train_size = 480;
        s.data.dims = 16;
        s.round.epochs = 5;
        s.round.warmup_epochs = 10;
        s.method = Method::centralized;
        cen.push_back(run_method(s).final_accuracy());
        s.method = Method::independent;
        ind.push_back(run_method(s).final_accuracy());
    }
    CHECK(mean(cen) >= mean(ind));
}

TEST_CASE("per-round acquisition placement runs") {
    ExperimentSpec s = small_spec(6);
    s.round.placement = AcquisitionPlacement::per_round;
    s.round.dreams_before_local = false;
    MetricsRecord rec = run_codream(s);
    CHECK(rec.final_metric("server", "accuracy").has_value());
}

TEST_CASE("non-collaborative mode pools per-client dreams") {
    ExperimentSpec s = small_spec(7);
    s.round.collaborative = false;
    MetricsRecord rec = run_codream(s);
    CHECK(bytes_for(rec, "pseudo_gradient", Direction::up) == 0);
    CHECK(bytes_for(rec, "local_dreams", Direction::up) == 2 * 16 * 8 * 8);
    s.round.dream_batch = 6;
    CHECK_THROWS_AS(run_codream(s), ContractError);
}
