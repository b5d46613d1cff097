#include "codream/comm.hpp"

#include <set>

#include "codream/tensor.hpp"

namespace codream {

void CommLedger::charge(const std::string& method, int epoch, int round, std::size_t client, Direction direction,
                        const std::string& payload, std::uint64_t elements) {
    records_.push_back({method, epoch, round, client, direction, payload, elements * kBytesPerElement});
}

void CommLedger::close_round(const std::string& method) { ++rounds_[method]; }

std::uint64_t CommLedger::total_bytes() const {
    std::uint64_t total = 0;
    for (const auto& r : records_) total += r.bytes;
    return total;
}

std::uint64_t CommLedger::total_bytes(const std::string& method) const {
    std::uint64_t total = 0;
    for (const auto& r : records_) {
        if (r.method == method) total += r.bytes;
    }
    return total;
}

std::uint64_t CommLedger::rounds(const std::string& method) const {
    auto it = rounds_.find(method);
    return it == rounds_.end() ? 0 : it->second;
}

std::vector<std::string> CommLedger::methods() const {
    std::set<std::string> names;
    for (const auto& r : records_) names.insert(r.method);
    for (const auto& [m, n] : rounds_) names.insert(m);
    return {names.begin(), names.end()};
}

std::vector<CommRow> comm_report(const CommLedger& ledger, const std::string& architecture, std::size_t clients) {
    std::vector<CommRow> rows;
    for (const auto& m : ledger.methods()) {
        CommRow row;
        row.method = m;
        row.architecture = architecture;
        row.clients = clients;
        row.rounds = ledger.rounds(m);
        row.total_bytes = ledger.total_bytes(m);
        if (row.rounds > 0) {
            row.bytes_per_round = static_cast<double>(row.total_bytes) / static_cast<double>(row.rounds);
            if (clients > 0) row.bytes_per_round_per_client = row.bytes_per_round / static_cast<double>(clients);
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace codream
