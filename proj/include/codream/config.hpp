#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "codream/federation.hpp"

namespace codream {

// Bad or missing configuration; `key` names the offending entry when known.
struct ConfigError : std::runtime_error {
    ConfigError(std::string key, const std::string& message);
    std::string key;
};

struct ExperimentConfig {
    ExperimentSpec spec;
    std::vector<std::uint64_t> seeds;
    std::string out_dir = "results";
};

// INI-style text: `key = value` lines grouped under [section] headers.
// Unknown keys and sections are rejected; required: experiment.method,
// experiment.seeds, data.classes, data.dims, rounds.clients.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every key, in a fixed order. parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& config);

// Section-qualified names of every accepted key.
std::vector<std::string> config_keys();

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace codream
