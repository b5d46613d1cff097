#include "codream/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace codream {

ConfigError::ConfigError(std::string k, const std::string& message)
    : std::runtime_error(message), key(std::move(k)) {}

namespace {

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || std::isnan(v)) {
        throw ConfigError(key, key + ": expected a number, got '" + s + "'");
    }
    return v;
}

std::uint64_t to_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) {
        throw ConfigError(key, key + ": expected a nonnegative integer, got '" + s + "'");
    }
    return v;
}

bool to_bool(const std::string& key, const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError(key, key + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        auto b = cur.find_first_not_of(" \t"), e = cur.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
    }
    return out;
}

template <class E>
E to_enum(const std::string& key, const std::string& s, E (*parse)(const std::string&)) {
    try {
        return parse(s);
    } catch (const ContractError& e) {
        throw ConfigError(key, key + ": " + e.what());
    }
}

AdaptiveScheme parse_adaptive(const std::string& s) {
    if (s == "none") return AdaptiveScheme::none;
    if (s == "jsd") return AdaptiveScheme::jsd;
    if (s == "minmax") return AdaptiveScheme::minmax;
    throw ContractError("unknown adaptive scheme '" + s + "'");
}
const char* adaptive_name(AdaptiveScheme a) {
    return a == AdaptiveScheme::none ? "none" : a == AdaptiveScheme::jsd ? "jsd" : "minmax";
}
DreamOptimizer parse_optimizer(const std::string& s) {
    if (s == "adam") return DreamOptimizer::adam;
    if (s == "sgd") return DreamOptimizer::sgd;
    throw ContractError("unknown optimizer '" + s + "'");
}
AcquisitionPlacement parse_placement(const std::string& s) {
    if (s == "per_epoch") return AcquisitionPlacement::per_epoch;
    if (s == "per_round") return AcquisitionPlacement::per_round;
    throw ContractError("unknown placement '" + s + "'");
}
Mode parse_mode(const std::string& s) {
    if (s == "eval") return Mode::eval;
    if (s == "train") return Mode::train;
    throw ContractError("unknown batchnorm mode '" + s + "'");
}

struct Field {
    std::string name;  // section.key
    bool required;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define SIZE_FIELD(NAME, REQ, EXPR)                                                      \
    Field {                                                                              \
        NAME, REQ, [](const ExperimentConfig& c) { return std::to_string(c.EXPR); },     \
            [](ExperimentConfig& c, const std::string& v) { c.EXPR = to_uint(NAME, v); } \
    }
#define REAL_FIELD(NAME, EXPR)                                                             \
    Field {                                                                                \
        NAME, false, [](const ExperimentConfig& c) { return fmt(c.EXPR); },                \
            [](ExperimentConfig& c, const std::string& v) { c.EXPR = to_double(NAME, v); } \
    }
#define BOOL_FIELD(NAME, EXPR)                                                               \
    Field {                                                                                  \
        NAME, false, [](const ExperimentConfig& c) { return std::string(c.EXPR ? "true" : "false"); }, \
            [](ExperimentConfig& c, const std::string& v) { c.EXPR = to_bool(NAME, v); }     \
    }
#define TEXT_FIELD(NAME, EXPR)                                                  \
    Field {                                                                     \
        NAME, false, [](const ExperimentConfig& c) { return c.EXPR; },          \
            [](ExperimentConfig& c, const std::string& v) { c.EXPR = v; }       \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"experiment.method", true, [](const ExperimentConfig& c) { return std::string(to_string(c.spec.method)); },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.method = to_enum<Method>("experiment.method", v, [](const std::string& s) { return parse_method(s); });
         }},
        {"experiment.seeds", true,
         [](const ExperimentConfig& c) {
             std::string out;
             for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? ", " : "") + std::to_string(c.seeds[i]);
             return out;
         },
         [](ExperimentConfig& c, const std::string& v) {
             c.seeds.clear();
             for (const auto& s : split(v, ',')) c.seeds.push_back(to_uint("experiment.seeds", s));
             if (c.seeds.empty()) throw ConfigError("experiment.seeds", "experiment.seeds: list is empty");
         }},
        TEXT_FIELD("experiment.out", out_dir),

        TEXT_FIELD("data.source", spec.data.source),
        SIZE_FIELD("data.train_size", false, spec.data.train_size),
        SIZE_FIELD("data.test_size", false, spec.data.test_size),
        SIZE_FIELD("data.classes", true, spec.data.classes),
        SIZE_FIELD("data.dims", true, spec.data.dims),
        REAL_FIELD("data.separation", spec.data.separation),
        REAL_FIELD("data.alpha", spec.data.alpha),
        TEXT_FIELD("data.train_csv", spec.data.train_csv),
        TEXT_FIELD("data.test_csv", spec.data.test_csv),

        {"models.client_layers", false,
         [](const ExperimentConfig& c) {
             std::string out;
             for (std::size_t i = 0; i < c.spec.models.client_layers.size(); ++i) {
                 out += (i ? "; " : "") + c.spec.models.client_layers[i];
             }
             return out;
         },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.models.client_layers = split(v, ';');
             if (c.spec.models.client_layers.empty()) {
                 throw ConfigError("models.client_layers", "models.client_layers: list is empty");
             }
         }},
        TEXT_FIELD("models.server_layers", spec.models.server_layers),

        SIZE_FIELD("rounds.epochs", false, spec.round.epochs),
        SIZE_FIELD("rounds.rounds", false, spec.round.rounds),
        SIZE_FIELD("rounds.local_steps", false, spec.round.local_steps),
        REAL_FIELD("rounds.local_lr", spec.round.local_lr),
        REAL_FIELD("rounds.global_lr", spec.round.global_lr),
        SIZE_FIELD("rounds.clients", true, spec.round.clients),
        SIZE_FIELD("rounds.dream_batch", false, spec.round.dream_batch),
        SIZE_FIELD("rounds.warmup_epochs", false, spec.round.warmup_epochs),
        SIZE_FIELD("rounds.buffer_capacity", false, spec.round.buffer_capacity),
        BOOL_FIELD("rounds.collaborative", spec.round.collaborative),
        {"rounds.adaptive", false, [](const ExperimentConfig& c) { return std::string(adaptive_name(c.spec.round.adaptive)); },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.round.adaptive = to_enum<AdaptiveScheme>("rounds.adaptive", v, parse_adaptive);
         }},
        {"rounds.placement", false,
         [](const ExperimentConfig& c) {
             return std::string(c.spec.round.placement == AcquisitionPlacement::per_epoch ? "per_epoch" : "per_round");
         },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.round.placement = to_enum<AcquisitionPlacement>("rounds.placement", v, parse_placement);
         }},
        BOOL_FIELD("rounds.dreams_before_local", spec.round.dreams_before_local),

        REAL_FIELD("extraction.w_entropy", spec.round.coeffs.w_entropy),
        REAL_FIELD("extraction.w_bn", spec.round.coeffs.w_bn),
        REAL_FIELD("extraction.w_adv", spec.round.coeffs.w_adv),
        REAL_FIELD("extraction.w_l2", spec.round.coeffs.w_l2),
        {"extraction.optimizer", false,
         [](const ExperimentConfig& c) {
             return std::string(c.spec.round.local_optimizer == DreamOptimizer::adam ? "adam" : "sgd");
         },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.round.local_optimizer = to_enum<DreamOptimizer>("extraction.optimizer", v, parse_optimizer);
         }},

        {"aggregation.weighting", false,
         [](const ExperimentConfig& c) { return std::string(to_string(c.spec.round.weighting)); },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.round.weighting = to_enum<WeightScheme>("aggregation.weighting", v, parse_weight_scheme);
         }},
        {"aggregation.server", false,
         [](const ExperimentConfig& c) { return std::string(to_string(c.spec.round.server)); },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.round.server = to_enum<ServerScheme>("aggregation.server", v, parse_server_scheme);
         }},
        REAL_FIELD("aggregation.beta1", spec.round.server_beta1),
        REAL_FIELD("aggregation.beta2", spec.round.server_beta2),
        REAL_FIELD("aggregation.tau", spec.round.server_tau),

        SIZE_FIELD("acquisition.kd_epochs", false, spec.round.kd.epochs),
        REAL_FIELD("acquisition.kd_lr", spec.round.kd.lr),
        REAL_FIELD("acquisition.kd_momentum", spec.round.kd.momentum),
        REAL_FIELD("acquisition.kd_temperature", spec.round.kd.temperature),
        {"acquisition.kd_bn_mode", false,
         [](const ExperimentConfig& c) { return std::string(c.spec.round.kd.mode == Mode::eval ? "eval" : "train"); },
         [](ExperimentConfig& c, const std::string& v) {
             c.spec.round.kd.mode = to_enum<Mode>("acquisition.kd_bn_mode", v, parse_mode);
         }},
        SIZE_FIELD("acquisition.ce_epochs", false, spec.round.ce.epochs),
        REAL_FIELD("acquisition.ce_lr", spec.round.ce.lr),
        REAL_FIELD("acquisition.ce_momentum", spec.round.ce.momentum),
        SIZE_FIELD("acquisition.ce_batch_size", false, spec.round.ce.batch_size),
        SIZE_FIELD("acquisition.guard_window", false, spec.round.guard_window),
        REAL_FIELD("acquisition.guard_threshold", spec.round.guard_threshold),
    };
    return table;
}

// Maps RoundConfig / ExperimentSpec field names in validation messages to
// config keys.
std::string key_for(const std::string& message) {
    const auto word = message.substr(0, message.find(' '));
    static const std::vector<std::pair<std::string, std::string>> alias = {
        {"kd_lr", "acquisition.kd_lr"},         {"kd_momentum", "acquisition.kd_momentum"},
        {"kd_temperature", "acquisition.kd_temperature"}, {"kd_epochs", "acquisition.kd_epochs"},
        {"ce_lr", "acquisition.ce_lr"},         {"ce_momentum", "acquisition.ce_momentum"},
        {"ce_batch_size", "acquisition.ce_batch_size"},   {"server_beta1", "aggregation.beta1"},
        {"server_beta2", "aggregation.beta2"},  {"server_tau", "aggregation.tau"},
    };
    for (const auto& [k, v] : alias) {
        if (word == k) return v;
    }
    for (const auto& f : fields()) {
        if (f.name.substr(f.name.find('.') + 1) == word) return f.name;
    }
    return word;
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.name);
    return out;
}

ExperimentConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("", "config line " + std::to_string(e.line()) + ": " + e.message());
    }

    std::map<std::string, std::string> values;
    std::set<std::string> sections;
    for (const auto& f : fields()) sections.insert(f.name.substr(0, f.name.find('.')));
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) throw ConfigError(section, "key '" + section + "' must sit inside a [section]");
        if (!sections.contains(section)) throw ConfigError(section, "unknown section [" + section + "]");
        for (const auto& [key, node] : body) values[section + "." + key] = node.data();
    }

    ExperimentConfig cfg;
    std::set<std::string> known;
    for (const auto& f : fields()) {
        known.insert(f.name);
        auto it = values.find(f.name);
        if (it == values.end()) {
            if (f.required) throw ConfigError(f.name, "missing required key " + f.name);
            continue;
        }
        f.set(cfg, it->second);
    }
    for (const auto& [k, v] : values) {
        if (!known.contains(k)) throw ConfigError(k, "unknown key " + k);
    }
    try {
        cfg.spec.validate();
    } catch (const ContractError& e) {
        const std::string key = key_for(e.what());
        throw ConfigError(key, "invalid value for " + key + ": " + e.what());
    } catch (const DimensionError& e) {
        throw ConfigError("models", std::string("invalid model layers: ") + e.what());
    }
    if (!cfg.seeds.empty()) cfg.spec.round.seed = cfg.seeds.front();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) {
    std::ostringstream out;
    std::string section;
    for (const auto& f : fields()) {
        const auto dot = f.name.find('.');
        const std::string s = f.name.substr(0, dot);
        if (s != section) {
            if (!section.empty()) out << '\n';
            out << '[' << s << "]\n";
            section = s;
        }
        out << f.name.substr(dot + 1) << " = " << f.get(config) << '\n';
    }
    return out.str();
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return serialize_config(a) == serialize_config(b);
}

}  // namespace codream
