#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace codream {

enum class Direction { down, up };

struct CommRecord {
    std::string method;
    int epoch = 0;
    int round = 0;  // global round inside the epoch; -1 for per-epoch payloads
    std::size_t client = 0;
    Direction direction = Direction::down;
    std::string payload;
    std::uint64_t bytes = 0;
};

// Every payload is a vector of 64-bit reals: bytes = elements * 8.
class CommLedger {
   public:
    static constexpr std::uint64_t kBytesPerElement = 8;

    void charge(const std::string& method, int epoch, int round, std::size_t client, Direction direction,
                const std::string& payload, std::uint64_t elements);
    // Marks one completed communication round for `method`.
    void close_round(const std::string& method);

    const std::vector<CommRecord>& records() const { return records_; }
    std::uint64_t total_bytes() const;
    std::uint64_t total_bytes(const std::string& method) const;
    std::uint64_t rounds(const std::string& method) const;
    std::vector<std::string> methods() const;

   private:
    std::vector<CommRecord> records_;
    std::map<std::string, std::uint64_t> rounds_;
};

struct CommRow {
    std::string method;
    std::string architecture;
    std::size_t clients = 0;
    std::uint64_t rounds = 0;
    std::uint64_t total_bytes = 0;
    double bytes_per_round = 0.0;             // all clients
    double bytes_per_round_per_client = 0.0;
};

// One row per method in the ledger, sorted by method name.
std::vector<CommRow> comm_report(const CommLedger& ledger, const std::string& architecture, std::size_t clients);

}  // namespace codream
