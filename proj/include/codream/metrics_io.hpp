#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "codream/federation.hpp"

namespace codream {

inline constexpr int kMetricsVersion = 1;

std::string metrics_filename(const std::string& method, std::uint64_t seed);

// One JSON object per line: a header, then metric rows, then ledger rows.
// No timestamps, so identical runs give identical bytes.
void write_metrics(const std::filesystem::path& path, const MetricsRecord& record);
MetricsRecord read_metrics(const std::filesystem::path& path);
std::vector<MetricsRecord> read_metrics_dir(const std::filesystem::path& dir);

struct SummaryRow {
    std::string method;
    std::size_t seeds = 0;
    double mean = 0.0;
    double std = 0.0;  // population (divide by n)
};

// Per-method final accuracy across seeds, sorted by method name.
std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string comm_csv(const std::vector<MetricsRecord>& records);

}  // namespace codream
