#include <string>

#include "codream/federation.hpp"
#include "codream/parallel.hpp"

namespace codream {

namespace {

struct Participant {
    Model model;
    Dataset data;
    Rng rng;
};

std::vector<Participant> participants(const ExperimentSpec& spec, Problem& p) {
    const std::size_t d = p.train.dims(), c = p.train.num_classes;
    std::vector<Participant> out;
    for (std::size_t k = 0; k < spec.round.clients; ++k) {
        const auto& layers = spec.models.client_layers[k % spec.models.client_layers.size()];
        out.push_back({Model::build(ArchitectureSpec::parse(layers, d, c), mix_seed(spec.round.seed, 400 + k)),
                       std::move(p.shards[k]), make_rng(spec.round.seed, 200 + k)});
    }
    return out;
}

MetricsRecord blank_record(Method kind, const ExperimentSpec& spec) {
    MetricsRecord rec;
    rec.method = to_string(kind);
    rec.seed = spec.round.seed;
    rec.clients = spec.round.clients;
    for (std::size_t k = 0; k < spec.round.clients; ++k) {
        if (k) rec.architecture += '|';
        rec.architecture += spec.models.client_layers[k % spec.models.client_layers.size()];
    }
    return rec;
}

void record_clients(MetricsRecord& rec, int round, const std::vector<Participant>& ps, const Dataset& test) {
    for (std::size_t k = 0; k < ps.size(); ++k) rec.add(round, std::to_string(k), "test", "accuracy", accuracy(ps[k].model, test));
}

void local_epochs(std::vector<Participant>& ps, std::size_t epochs, const CeOptions& ce) {
    if (epochs == 0) return;
    CeOptions opt = ce;
    opt.epochs = epochs;
    parallel_for(ps.size(), [&](std::size_t k) {
        ps[k].model = train_on_local(std::move(ps[k].model), ps[k].data, opt, ps[k].rng);
    });
}

MetricsRecord run_centralized(const ExperimentSpec& spec) {
    const auto& cfg = spec.round;
    Problem p = make_problem(spec.data, cfg.clients, cfg.seed);
    MetricsRecord rec = blank_record(Method::centralized, spec);
    Model model = Model::build(
        ArchitectureSpec::parse(spec.models.client_layers.front(), p.train.dims(), p.train.num_classes),
        mix_seed(cfg.seed, 400));
    Rng rng = make_rng(cfg.seed, 200);
    CeOptions warm = cfg.ce;
    warm.epochs = cfg.warmup_epochs;
    if (warm.epochs > 0) model = train_on_local(std::move(model), p.train, warm, rng);
    rec.add(0, "server", "test", "accuracy", accuracy(model, p.test));
    for (std::size_t t = 0; t < cfg.epochs; ++t) {
        model = train_on_local(std::move(model), p.train, cfg.ce, rng);
        rec.add(static_cast<int>(t) + 1, "server", "test", "accuracy", accuracy(model, p.test));
    }
    return rec;
}

MetricsRecord run_independent(const ExperimentSpec& spec) {
    const auto& cfg = spec.round;
    Problem p = make_problem(spec.data, cfg.clients, cfg.seed);
    MetricsRecord rec = blank_record(Method::independent, spec);
    auto ps = participants(spec, p);
    local_epochs(ps, cfg.warmup_epochs, cfg.ce);
    record_clients(rec, 0, ps, p.test);
    for (std::size_t t = 0; t < cfg.epochs; ++t) {
        local_epochs(ps, cfg.ce.epochs, cfg.ce);
        record_clients(rec, static_cast<int>(t) + 1, ps, p.test);
    }
    return rec;
}

MetricsRecord run_fedavg(const ExperimentSpec& spec) {
    const auto& cfg = spec.round;
    for (const auto& l : spec.models.client_layers) {
        if (ArchitectureSpec::parse(l, 1, 2).hidden != ArchitectureSpec::parse(spec.models.client_layers.front(), 1, 2).hidden) {
            throw ContractError("fedavg needs identical client architectures, got '" + l + "' and '" +
                                spec.models.client_layers.front() + "'");
        }
    }
    Problem p = make_problem(spec.data, cfg.clients, cfg.seed);
    MetricsRecord rec = blank_record(Method::fedavg, spec);
    auto ps = participants(spec, p);
    std::vector<std::size_t> sizes;
    for (const auto& q : ps) sizes.push_back(q.data.size());
    const auto w = client_weights(sizes, WeightScheme::proportional);
    Model global = ps.front().model;
    const std::uint64_t elems = communicated_size(global);
    const std::size_t total_rounds = cfg.warmup_epochs + cfg.epochs;
    for (std::size_t t = 0; t < total_rounds; ++t) {
        for (std::size_t k = 0; k < ps.size(); ++k) {
            ps[k].model = global;
            rec.ledger.charge("fedavg", static_cast<int>(t), 0, k, Direction::down, "model", elems);
        }
        local_epochs(ps, cfg.ce.epochs, cfg.ce);
        for (std::size_t k = 0; k < ps.size(); ++k) {
            rec.ledger.charge("fedavg", static_cast<int>(t), 0, k, Direction::up, "model", elems);
        }
        rec.ledger.close_round("fedavg");
        std::vector<Model> uploads;
        for (const auto& q : ps) uploads.push_back(q.model);
        global = average_models(uploads, w);
        if (t + 1 >= cfg.warmup_epochs) {
            rec.add(static_cast<int>(t + 1 - cfg.warmup_epochs), "server", "test", "accuracy",
                    accuracy(global, p.test));
        }
    }
    return rec;
}

MetricsRecord run_avgkd(const ExperimentSpec& spec) {
    const auto& cfg = spec.round;
    Problem p = make_problem(spec.data, cfg.clients, cfg.seed);
    MetricsRecord rec = blank_record(Method::avgkd, spec);
    auto ps = participants(spec, p);
    local_epochs(ps, cfg.warmup_epochs, cfg.ce);
    record_clients(rec, 0, ps, p.test);
    const std::size_t k_count = ps.size();
    for (std::size_t t = 0; t < cfg.epochs; ++t) {
        // All-to-all model exchange: every model reaches K - 1 peers.
        std::vector<Model> snapshot;
        for (std::size_t j = 0; j < k_count; ++j) {
            snapshot.push_back(ps[j].model);
            for (std::size_t i = 0; i < k_count; ++i) {
                if (i != j) rec.ledger.charge("avgkd", static_cast<int>(t), 0, i, Direction::down, "peer_model",
                                              communicated_size(ps[j].model));
            }
        }
        rec.ledger.close_round("avgkd");
        parallel_for(k_count, [&](std::size_t i) {
            auto& me = ps[i];
            std::vector<Tensor> peers;
            for (std::size_t j = 0; j < k_count; ++j) {
                if (j != i) peers.push_back(snapshot[j].predict_proba(me.data.features));
            }
            Tensor targets = avgkd_targets(one_hot(me.data.labels, me.data.num_classes), peers);
            SoftLabelSet set;
            for (const auto& rows : minibatches(me.data.size(), cfg.ce.batch_size, me.rng)) {
                set.add(gather_rows(me.data.features, rows), gather_rows(targets, rows));
            }
            KdOptions kd = cfg.kd;
            kd.mode = Mode::train;
            me.model = train_on_dreams(std::move(me.model), set, kd, me.rng);
            me.model = train_on_local(std::move(me.model), me.data, cfg.ce, me.rng);
        });
        record_clients(rec, static_cast<int>(t) + 1, ps, p.test);
    }
    return rec;
}

}  // namespace

Model average_models(std::span<const Model> models, std::span<const double> weights) {
    if (models.empty() || models.size() != weights.size()) {
        throw ContractError("average_models: need one weight per model");
    }
    Model out = models.front();
    auto dst = out.parameters();
    for (auto* t : dst) *t = Tensor::zeros(t->shape());
    for (auto& bn : out.bn_states()) {
        bn.running_mean = Tensor::zeros(bn.running_mean.shape());
        bn.running_var = Tensor::zeros(bn.running_var.shape());
    }
    for (std::size_t k = 0; k < models.size(); ++k) {
        if (!(models[k].spec().hidden == out.spec().hidden)) {
            throw ContractError("average_models: architectures differ");
        }
        auto src = models[k].parameters();
        for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += weights[k] * *src[i];
        const auto& sbn = models[k].bn_states();
        for (std::size_t l = 0; l < sbn.size(); ++l) {
            out.bn_states()[l].running_mean += weights[k] * sbn[l].running_mean;
            out.bn_states()[l].running_var += weights[k] * sbn[l].running_var;
        }
    }
    return out;
}

MetricsRecord run_baseline(Method kind, const ExperimentSpec& spec) {
    spec.validate();
    switch (kind) {
        case Method::centralized: return run_centralized(spec);
        case Method::independent: return run_independent(spec);
        case Method::fedavg: return run_fedavg(spec);
        case Method::avgkd: return run_avgkd(spec);
        case Method::codream: break;
    }
    throw ContractError("run_baseline: codream is not a baseline");
}

}  // namespace codream
