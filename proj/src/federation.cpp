#include "codream/federation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "codream/parallel.hpp"

namespace codream {

Method parse_method(const std::string& name) {
    if (name == "codream") return Method::codream;
    if (name == "centralized") return Method::centralized;
    if (name == "independent") return Method::independent;
    if (name == "fedavg") return Method::fedavg;
    if (name == "avgkd") return Method::avgkd;
    throw ContractError("unknown method '" + name + "'");
}

const char* to_string(Method method) {
    switch (method) {
        case Method::codream: return "codream";
        case Method::centralized: return "centralized";
        case Method::independent: return "independent";
        case Method::fedavg: return "fedavg";
        case Method::avgkd: return "avgkd";
    }
    return "?";
}

namespace {

void require(bool ok, const std::string& field, const std::string& rule) {
    if (!ok) throw ContractError(field + " " + rule);
}

}  // namespace

void RoundConfig::validate() const {
    require(epochs >= 1, "epochs", "must be at least 1");
    require(rounds >= 1, "rounds", "must be at least 1");
    require(local_steps >= 1, "local_steps", "must be at least 1");
    require(clients >= 1, "clients", "must be at least 1");
    require(dream_batch >= 2, "dream_batch", "must be at least 2");
    require(buffer_capacity >= 1, "buffer_capacity", "must be at least 1");
    require(local_lr > 0.0, "local_lr", "must be positive");
    require(global_lr > 0.0, "global_lr", "must be positive");
    require(server_beta1 >= 0.0 && server_beta1 < 1.0, "server_beta1", "must lie in [0, 1)");
    require(server_beta2 >= 0.0 && server_beta2 < 1.0, "server_beta2", "must lie in [0, 1)");
    require(server_tau > 0.0, "server_tau", "must be positive");
    require(kd.lr > 0.0, "kd_lr", "must be positive");
    require(kd.momentum >= 0.0 && kd.momentum < 1.0, "kd_momentum", "must lie in [0, 1)");
    require(kd.temperature > 0.0, "kd_temperature", "must be positive");
    require(kd.epochs >= 1, "kd_epochs", "must be at least 1");
    require(ce.lr > 0.0, "ce_lr", "must be positive");
    require(ce.momentum >= 0.0 && ce.momentum < 1.0, "ce_momentum", "must lie in [0, 1)");
    require(ce.batch_size >= 2, "ce_batch_size", "must be at least 2");
    require(guard_window >= 1, "guard_window", "must be at least 1");
    require(guard_threshold >= 0.0, "guard_threshold", "must be nonnegative");
    require(collaborative || dream_batch >= 2 * clients, "dream_batch",
            "must give every client at least two rows when collaborative = false");
    coeffs.validate();
    require(adaptive != AdaptiveScheme::jsd || coeffs.w_adv > 0.0, "w_adv", "must be positive for adaptive = jsd");
    require(adaptive == AdaptiveScheme::jsd || coeffs.w_adv == 0.0, "w_adv",
            "needs the server model; set adaptive = jsd");
}

void ExperimentSpec::validate() const {
    round.validate();
    require(data.source == "gaussian_mixture" || data.source == "csv", "source",
            "must be gaussian_mixture or csv");
    if (data.source == "gaussian_mixture") {
        require(data.classes >= 2, "classes", "must be at least 2");
        require(data.dims >= 2, "dims", "must be at least 2");
        require(data.separation > 0.0, "separation", "must be positive");
        require(data.train_size >= round.clients, "train_size", "must be at least the number of clients");
        require(data.train_size >= data.classes, "train_size", "must be at least the number of classes");
        require(data.test_size >= data.classes, "test_size", "must be at least the number of classes");
    } else {
        require(!data.train_csv.empty(), "train_csv", "is required for source = csv");
        require(!data.test_csv.empty(), "test_csv", "is required for source = csv");
    }
    require(data.alpha > 0.0, "alpha", "must be positive");
    require(!models.client_layers.empty(), "client_layers", "must list at least one architecture");
    for (const auto& l : models.client_layers) ArchitectureSpec::parse(l, data.dims, data.classes).validate();
    ArchitectureSpec::parse(models.server_layers, data.dims, data.classes).validate();
}

void MetricsRecord::add(int round, const std::string& client, const std::string& split, const std::string& metric,
                        double value) {
    rows.push_back({method, seed, round, client, split, metric, value});
}

std::optional<double> MetricsRecord::final_metric(const std::string& client, const std::string& metric) const {
    std::optional<double> out;
    int best = -1;
    for (const auto& r : rows) {
        if (r.client == client && r.metric == metric && r.round >= best) {
            best = r.round;
            out = r.value;
        }
    }
    return out;
}

double MetricsRecord::final_client_mean(const std::string& metric) const {
    int last = -1;
    for (const auto& r : rows) {
        if (r.client != "server" && r.metric == metric) last = std::max(last, r.round);
    }
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& r : rows) {
        if (r.client != "server" && r.metric == metric && r.round == last) {
            total += r.value;
            ++count;
        }
    }
    if (count == 0) throw ContractError("metrics hold no client rows for '" + metric + "'");
    return total / static_cast<double>(count);
}

double MetricsRecord::final_accuracy() const {
    if (method == "centralized" || method == "fedavg") {
        auto v = final_metric("server", "accuracy");
        if (!v) throw ContractError("metrics hold no server accuracy");
        return *v;
    }
    return final_client_mean("accuracy");
}

Problem make_problem(const DataConfig& data, std::size_t clients, std::uint64_t seed) {
    Problem p;
    if (data.source == "csv") {
        p.train = load_csv(data.train_csv, data.classes);
        p.test = load_csv(data.test_csv, p.train.num_classes);
    } else {
        p.train = gen_gaussian_mixture(data.train_size, data.classes, data.dims, data.separation, mix_seed(seed, 1));
        p.test = gen_gaussian_mixture(data.test_size, data.classes, data.dims, data.separation, mix_seed(seed, 2));
    }
    p.train.name = "train";
    p.test.name = "test";
    if (clients == 1) {
        // A lone client owns the whole training set; nothing to partition.
        p.plan.clients.assign(1, std::vector<std::size_t>(p.train.size()));
        std::iota(p.plan.clients[0].begin(), p.plan.clients[0].end(), std::size_t{0});
        p.plan.alpha = data.alpha;
    } else {
        p.plan = dirichlet_partition(p.train.labels, clients, data.alpha, mix_seed(seed, 3));
    }
    for (std::size_t k = 0; k < clients; ++k) {
        p.shards.push_back(p.train.subset(p.plan.clients[k], "client" + std::to_string(k)));
    }
    return p;
}

Client::Client(std::size_t id, Model model, Dataset data, std::uint64_t seed)
    : id_(id), model_(std::move(model)), data_(std::move(data)), rng_(make_rng(seed, 200 + id)) {}

void Client::warmup(std::size_t epochs, const CeOptions& ce) {
    if (epochs == 0) return;
    CeOptions opt = ce;
    opt.epochs = epochs;
    TrainTrace tr;
    model_ = train_on_local(std::move(model_), data_, opt, rng_, &tr);
    last_ce_loss = tr.final_loss;
}

PseudoGradient Client::dream(const Tensor& x, const Model* server_view, const LocalDreamOptions& options,
                             double weight, std::vector<double>* losses) const {
    DreamBatch batch;
    batch.x = x;
    auto res = local_dream_update(model_, server_view, std::move(batch), options);
    if (losses) *losses = std::move(res.losses);
    return {id_, std::move(res.pseudo_gradient), weight};
}

Tensor Client::soft_labels(const Tensor& x) const { return model_.predict_proba(x); }

void Client::learn(const SoftLabelSet& dreams, const RoundConfig& cfg) {
    auto kd_step = [&] {
        TrainTrace tr;
        model_ = train_on_dreams(std::move(model_), dreams, cfg.kd, rng_, &tr);
        last_kd_loss = tr.final_loss;
    };
    auto ce_step = [&] {
        if (guard_.stopped) return;
        TrainTrace tr;
        model_ = train_on_local(std::move(model_), data_, cfg.ce, rng_, &tr);
        last_ce_loss = tr.final_loss;
    };
    if (cfg.dreams_before_local) {
        kd_step();
        ce_step();
    } else {
        ce_step();
        kd_step();
    }
}

void Client::train_local(const CeOptions& ce) {
    TrainTrace tr;
    model_ = train_on_local(std::move(model_), data_, ce, rng_, &tr);
    last_ce_loss = tr.final_loss;
}

void Client::observe_heldout(const SoftLabelSet& heldout, const RoundConfig& cfg) {
    heldout_history_.push_back(soft_accuracy(model_, heldout));
    divergence_guard(heldout_history_, cfg.guard_window, cfg.guard_threshold, guard_);
}

double Client::test_accuracy(const Dataset& test) const { return accuracy(model_, test); }
double Client::own_accuracy() const { return accuracy(model_, data_); }

std::uint64_t Client::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : model_.parameters()) {
        for (double v : p->values()) {
            h ^= std::bit_cast<std::uint64_t>(v);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::size_t communicated_size(const Model& model) {
    std::size_t n = model.parameter_count();
    for (const auto& bn : model.bn_states()) n += bn.running_mean.size() + bn.running_var.size();
    return n;
}

FederationState make_federation(const ExperimentSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto& cfg = spec.round;
    Problem p = make_problem(spec.data, cfg.clients, seed);
    const std::size_t d = p.train.dims(), c = p.train.num_classes;
    FederationState st{.clients = {},
                       .server = Model::build(ArchitectureSpec::parse(spec.models.server_layers, d, c, "server"),
                                              mix_seed(seed, 499)),
                       .buffer = DreamBuffer(cfg.buffer_capacity),
                       .test = std::move(p.test),
                       .weights = {},
                       .ledger = {},
                       .metrics = {},
                       .seed = seed,
                       .epoch = 0,
                       .last_dreams = {}};
    std::vector<std::size_t> sizes;
    for (std::size_t k = 0; k < cfg.clients; ++k) {
        const auto& layers = spec.models.client_layers[k % spec.models.client_layers.size()];
        Model m = Model::build(ArchitectureSpec::parse(layers, d, c), mix_seed(seed, 400 + k));
        sizes.push_back(p.shards[k].size());
        st.clients.emplace_back(k, std::move(m), std::move(p.shards[k]), seed);
    }
    st.weights = client_weights(sizes, cfg.weighting);
    return st;
}

void run_warmup(FederationState& state, std::size_t epochs, const CeOptions& ce) {
    if (epochs == 0) return;
    parallel_for(state.clients.size(), [&](std::size_t k) { state.clients[k].warmup(epochs, ce); });
}

namespace {

constexpr const char* kCodream = "codream";

LocalDreamOptions dream_options(const RoundConfig& cfg) {
    return {cfg.local_steps, cfg.local_lr, cfg.local_optimizer, cfg.adaptive, cfg.coeffs};
}

ServerOptimizerState server_state(const RoundConfig& cfg) {
    ServerOptimizerState s;
    s.scheme = cfg.server;
    s.global_lr = cfg.global_lr;
    s.beta1 = cfg.server_beta1;
    s.beta2 = cfg.server_beta2;
    s.tau = cfg.server_tau;
    return s;
}

std::string failure_context(int epoch, std::size_t round, std::size_t client) {
    return "epoch " + std::to_string(epoch) + ", round " + std::to_string(round) + ", client " +
           std::to_string(client);
}

// One aggregation round over all clients; returns the new dream state.
Tensor collaborative_round(FederationState& state, const RoundConfig& cfg, const Tensor& x,
                           ServerOptimizerState& opt, std::size_t r, double& mean_loss) {
    const std::size_t k_count = state.clients.size();
    const std::uint64_t elems = x.size();
    const Model* server_view = cfg.adaptive == AdaptiveScheme::none ? nullptr : &state.server;
    for (std::size_t k = 0; k < k_count; ++k) {
        state.ledger.charge(kCodream, state.epoch, static_cast<int>(r), k, Direction::down, "dreams", elems);
        // The read-only server copy only changes when the server learns.
        if (server_view && (r == 0 || cfg.placement == AcquisitionPlacement::per_round)) {
            state.ledger.charge(kCodream, state.epoch, static_cast<int>(r), k, Direction::down, "server_model",
                                communicated_size(state.server));
        }
    }
    std::vector<PseudoGradient> deltas(k_count);
    std::vector<std::vector<double>> losses(k_count);
    auto opts = dream_options(cfg);
    parallel_for(k_count, [&](std::size_t k) {
        try {
            deltas[k] = state.clients[k].dream(x, server_view, opts, state.weights[k], &losses[k]);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (" + failure_context(state.epoch, r, k) + ")");
        }
    });
    mean_loss = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
        state.ledger.charge(kCodream, state.epoch, static_cast<int>(r), k, Direction::up, "pseudo_gradient", elems);
        mean_loss += state.weights[k] * losses[k].back();
    }
    state.ledger.close_round(kCodream);
    Tensor next = server_apply(x, aggregate_deltas(deltas), opt);
    if (!next.all_finite()) {
        throw NumericError("non-finite dreams after aggregation (epoch " + std::to_string(state.epoch) +
                           ", round " + std::to_string(r) + ")");
    }
    return next;
}

// Each client optimizes its own share of rows; the results are pooled.
Tensor independent_dreams(FederationState& state, const RoundConfig& cfg, const Tensor& x, double& mean_loss) {
    const std::size_t k_count = state.clients.size();
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<std::size_t> begin(k_count + 1, 0);
    for (std::size_t k = 0; k < k_count; ++k) begin[k + 1] = begin[k] + n / k_count + (k < n % k_count ? 1 : 0);
    std::vector<Tensor> parts(k_count);
    std::vector<double> last_loss(k_count, 0.0);
    auto opts = dream_options(cfg);
    const Model* server_view = cfg.adaptive == AdaptiveScheme::none ? nullptr : &state.server;
    parallel_for(k_count, [&](std::size_t k) {
        std::vector<std::size_t> rows(begin[k + 1] - begin[k]);
        std::iota(rows.begin(), rows.end(), begin[k]);
        Tensor xk = gather_rows(x, rows);
        ServerOptimizerState opt = server_state(cfg);
        for (std::size_t r = 0; r < cfg.rounds; ++r) {
            std::vector<double> losses;
            try {
                PseudoGradient g = state.clients[k].dream(xk, server_view, opts, 1.0, &losses);
                xk = server_apply(xk, g.delta, opt);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (" + failure_context(state.epoch, r, k) + ")");
            }
            last_loss[k] = losses.back();
        }
        parts[k] = std::move(xk);
    });
    std::vector<double> pooled;
    pooled.reserve(n * d);
    mean_loss = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
        if (server_view) {
            state.ledger.charge(kCodream, state.epoch, -1, k, Direction::down, "server_model",
                                communicated_size(state.server));
        }
        pooled.insert(pooled.end(), parts[k].values().begin(), parts[k].values().end());
        state.ledger.charge(kCodream, state.epoch, -1, k, Direction::up, "local_dreams", parts[k].size());
        mean_loss += state.weights[k] * last_loss[k];
    }
    for (std::size_t r = 0; r < cfg.rounds; ++r) state.ledger.close_round(kCodream);
    return Tensor({n, d}, std::move(pooled));
}

// Soft labels for x: broadcast, per-client predictions, aggregate, broadcast.
Tensor ensemble_labels(FederationState& state, const Tensor& x, int round) {
    const std::size_t k_count = state.clients.size();
    std::vector<Tensor> probs(k_count);
    parallel_for(k_count, [&](std::size_t k) { probs[k] = state.clients[k].soft_labels(x); });
    for (std::size_t k = 0; k < k_count; ++k) {
        state.ledger.charge(kCodream, state.epoch, round, k, Direction::down, "final_dreams", x.size());
        state.ledger.charge(kCodream, state.epoch, round, k, Direction::up, "soft_labels", probs[k].size());
        state.ledger.charge(kCodream, state.epoch, round, k, Direction::down, "aggregated_labels", probs[k].size());
    }
    return aggregate_soft_labels(probs, state.weights);
}

void acquire(FederationState& state, const RoundConfig& cfg, const SoftLabelSet& dreams) {
    Rng server_rng = make_rng(state.seed, 300 + static_cast<std::uint64_t>(state.epoch));
    TrainTrace tr;
    state.server = train_on_dreams(std::move(state.server), dreams, cfg.kd, server_rng, &tr);
    state.metrics.push_back({kCodream, state.seed, state.epoch, "server", "dreams", "kd_loss", tr.final_loss});
    parallel_for(state.clients.size(), [&](std::size_t k) { state.clients[k].learn(dreams, cfg); });
}

}  // namespace

void run_codream_round(FederationState& state, const RoundConfig& cfg) {
    const std::size_t n = cfg.dream_batch, d = state.test.dims();
    Rng dream_rng = make_rng(state.seed, 1000 + static_cast<std::uint64_t>(state.epoch));
    Tensor x = standard_normal({n, d}, dream_rng);
    double dream_loss = 0.0;

    if (cfg.collaborative) {
        ServerOptimizerState opt = server_state(cfg);
        for (std::size_t r = 0; r < cfg.rounds; ++r) {
            x = collaborative_round(state, cfg, x, opt, r, dream_loss);
            if (cfg.placement == AcquisitionPlacement::per_round && r + 1 < cfg.rounds) {
                SoftLabelSet current = SoftLabelSet::from_buffer(state.buffer);
                current.add(x, ensemble_labels(state, x, static_cast<int>(r)));
                acquire(state, cfg, current);
            }
        }
    } else {
        x = independent_dreams(state, cfg, x, dream_loss);
    }

    Tensor y = ensemble_labels(state, x, -1);
    SoftLabelSet fresh;
    fresh.add(x, y);
    for (auto& c : state.clients) c.observe_heldout(fresh, cfg);

    state.buffer.push(x, y, state.epoch);
    state.last_dreams = x;
    acquire(state, cfg, SoftLabelSet::from_buffer(state.buffer));

    const int round = state.epoch + 1;
    for (const auto& c : state.clients) {
        const std::string id = std::to_string(c.id());
        state.metrics.push_back({kCodream, state.seed, round, id, "test", "accuracy", c.test_accuracy(state.test)});
        state.metrics.push_back({kCodream, state.seed, round, id, "dreams", "kd_loss", c.last_kd_loss});
        state.metrics.push_back({kCodream, state.seed, round, id, "train", "ce_loss", c.last_ce_loss});
        state.metrics.push_back(
            {kCodream, state.seed, round, id, "train", "local_enabled", c.local_training_enabled() ? 1.0 : 0.0});
    }
    state.metrics.push_back(
        {kCodream, state.seed, round, "server", "test", "accuracy", accuracy(state.server, state.test)});
    state.metrics.push_back({kCodream, state.seed, round, "server", "dreams", "extraction_loss", dream_loss});
    ++state.epoch;
}

namespace {

std::string joined_layers(const ModelConfig& models, std::size_t clients) {
    std::string out;
    for (std::size_t k = 0; k < clients; ++k) {
        if (k) out += '|';
        out += models.client_layers[k % models.client_layers.size()];
    }
    return out;
}

}  // namespace

MetricsRecord run_codream(const ExperimentSpec& spec) {
    const auto& cfg = spec.round;
    FederationState state = make_federation(spec, cfg.seed);
    MetricsRecord rec;
    rec.method = kCodream;
    rec.seed = cfg.seed;
    rec.clients = cfg.clients;
    rec.architecture = joined_layers(spec.models, cfg.clients);

    run_warmup(state, cfg.warmup_epochs, cfg.ce);
    for (const auto& c : state.clients) {
        state.metrics.push_back({kCodream, cfg.seed, 0, std::to_string(c.id()), "test", "accuracy",
                                 c.test_accuracy(state.test)});
    }
    for (std::size_t t = 0; t < cfg.epochs; ++t) run_codream_round(state, cfg);

    rec.rows = std::move(state.metrics);
    rec.ledger = std::move(state.ledger);
    return rec;
}

MetricsRecord run_method(const ExperimentSpec& spec) {
    return spec.method == Method::codream ? run_codream(spec) : run_baseline(spec.method, spec);
}

}  // namespace codream
