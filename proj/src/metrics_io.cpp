#include "codream/metrics_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include "json.hpp"
#include <sstream>

namespace codream {

using nlohmann::json;

std::string metrics_filename(const std::string& method, std::uint64_t seed) {
    return method + "_seed" + std::to_string(seed) + ".jsonl";
}

void write_metrics(const std::filesystem::path& path, const MetricsRecord& record) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << json{{"kind", "header"},
                    {"format", "codream-metrics"},
                    {"version", kMetricsVersion},
                    {"method", record.method},
                    {"seed", record.seed},
                    {"clients", record.clients},
                    {"architecture", record.architecture}}
                   .dump()
            << '\n';
        for (const auto& r : record.rows) {
            out << json{{"kind", "metric"}, {"round", r.round},   {"client", r.client},
                        {"split", r.split}, {"metric", r.metric}, {"value", r.value}}
                       .dump()
                << '\n';
        }
        for (const auto& c : record.ledger.records()) {
            out << json{{"kind", "comm"},
                        {"method", c.method},
                        {"epoch", c.epoch},
                        {"round", c.round},
                        {"client", c.client},
                        {"direction", c.direction == Direction::up ? "up" : "down"},
                        {"payload", c.payload},
                        {"bytes", c.bytes}}
                       .dump()
                << '\n';
        }
        for (const auto& m : record.ledger.methods()) {
            out << json{{"kind", "comm_rounds"}, {"method", m}, {"rounds", record.ledger.rounds(m)}}.dump() << '\n';
        }
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

MetricsRecord read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    MetricsRecord rec;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "header") {
            if (header) throw std::runtime_error(path.string() + ": second header at line " + std::to_string(lineno));
            if (j.at("version").get<int>() > kMetricsVersion) {
                throw std::runtime_error(path.string() + ": unsupported metrics version");
            }
            header = true;
            rec.method = j.at("method");
            rec.seed = j.at("seed");
            rec.clients = j.at("clients");
            rec.architecture = j.at("architecture");
        } else if (!header) {
            throw std::runtime_error(path.string() + ": missing header");
        } else if (kind == "metric") {
            rec.rows.push_back({rec.method, rec.seed, j.at("round"), j.at("client"), j.at("split"), j.at("metric"),
                                j.at("value")});
        } else if (kind == "comm") {
            const std::uint64_t bytes = j.at("bytes");
            if (bytes % CommLedger::kBytesPerElement != 0) {
                throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": byte count not a multiple of 8");
            }
            rec.ledger.charge(j.at("method"), j.at("epoch"), j.at("round"), j.at("client"),
                              j.at("direction") == "up" ? Direction::up : Direction::down, j.at("payload"),
                              bytes / CommLedger::kBytesPerElement);
        } else if (kind == "comm_rounds") {
            const std::uint64_t n = j.at("rounds");
            for (std::uint64_t i = 0; i < n; ++i) rec.ledger.close_round(j.at("method"));
        } else {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": unknown record kind " + kind);
        }
    }
    if (!header) throw std::runtime_error(path.string() + ": empty metrics file");
    return rec;
}

std::vector<MetricsRecord> read_metrics_dir(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(dir)) {
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.path().extension() == ".jsonl") files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<MetricsRecord> out;
    for (const auto& f : files) out.push_back(read_metrics(f));
    return out;
}

std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records) {
    std::map<std::string, std::vector<double>> by_method;
    for (const auto& r : records) by_method[r.method].push_back(r.final_accuracy());
    std::vector<SummaryRow> out;
    for (const auto& [m, acc] : by_method) {
        SummaryRow row{m, acc.size(), 0.0, 0.0};
        for (double a : acc) row.mean += a;
        row.mean /= static_cast<double>(acc.size());
        for (double a : acc) row.std += (a - row.mean) * (a - row.mean);
        row.std = std::sqrt(row.std / static_cast<double>(acc.size()));
        out.push_back(row);
    }
    return out;
}

namespace {

std::string fixed(double v, int digits) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
}

}  // namespace

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::string out = "# final test accuracy across seeds; std is the population std (divide by n)\n";
    out += "method,seeds,mean_accuracy,std_accuracy\n";
    for (const auto& r : rows) {
        out += r.method + "," + std::to_string(r.seeds) + "," + fixed(r.mean, 4) + "," + fixed(r.std, 4) + "\n";
    }
    return out;
}

std::string comm_csv(const std::vector<MetricsRecord>& records) {
    // One row per (method, architecture); seeds share the accounting.
    std::map<std::pair<std::string, std::string>, CommRow> rows;
    for (const auto& rec : records) {
        for (const auto& row : comm_report(rec.ledger, rec.architecture, rec.clients)) {
            rows.emplace(std::make_pair(row.method, row.architecture), row);
        }
    }
    std::string out = "method,architecture,clients,rounds,bytes_per_round,bytes_per_round_per_client,total_bytes\n";
    for (const auto& [key, r] : rows) {
        out += r.method + ",\"" + r.architecture + "\"," + std::to_string(r.clients) + "," + std::to_string(r.rounds) +
               "," + fixed(r.bytes_per_round, 1) + "," + fixed(r.bytes_per_round_per_client, 1) + "," +
               std::to_string(r.total_bytes) + "\n";
    }
    return out;
}

}  // namespace codream
