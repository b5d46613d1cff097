#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>

#include "CLI11.hpp"
#include "codream/config.hpp"
#include "codream/fault_injection.hpp"
#include "codream/metrics_io.hpp"
#include "codream/parallel.hpp"
#include "codream/selftest.hpp"

using namespace codream;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;
constexpr int kNumericError = 3;

struct RunOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string method;
    std::string out;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

int report_records(const std::vector<MetricsRecord>& records, const std::filesystem::path& dir) {
    const std::string summary = summary_csv(summarize(records));
    const std::string comm = comm_csv(records);
    write_text(dir / "summary.csv", summary);
    write_text(dir / "comm.csv", comm);
    std::cout << summary << '\n' << comm;
    return kOk;
}

int execute(ExperimentConfig cfg, const std::vector<Method>& methods, const RunOptions& opt) {
    if (opt.seed) cfg.seeds = {*opt.seed};
    if (!opt.out.empty()) cfg.out_dir = opt.out;
    const std::filesystem::path dir = cfg.out_dir;
    std::filesystem::create_directories(dir);

    struct Job {
        Method method;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (Method m : methods) {
        for (auto s : cfg.seeds) jobs.push_back({m, s});
    }
    std::vector<MetricsRecord> records(jobs.size());
    std::mutex log;
    parallel_for(jobs.size(), [&](std::size_t i) {
        ExperimentSpec spec = cfg.spec;
        spec.method = jobs[i].method;
        spec.round.seed = jobs[i].seed;
        records[i] = run_method(spec);
        write_metrics(dir / metrics_filename(to_string(spec.method), spec.round.seed), records[i]);
        std::lock_guard lock(log);
        std::cerr << to_string(spec.method) << " seed " << spec.round.seed << ": accuracy "
                  << records[i].final_accuracy() << '\n';
    });
    return report_records(records, dir);
}

template <class F>
int guarded(F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumericError;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Collaborative data-free distillation experiments"};
    app.require_subcommand(1);

    RunOptions run_opt;
    auto* run = app.add_subcommand("run", "Run one method for every configured seed");
    run->add_option("--config", run_opt.config, "Experiment config file")->required();
    run->add_option("--seed", run_opt.seed, "Run only this seed");
    run->add_option("--method", run_opt.method, "Override experiment.method");
    run->add_option("--out", run_opt.out, "Output directory");

    RunOptions sweep_opt;
    auto* sweep = app.add_subcommand("sweep", "Run all five methods for every configured seed");
    sweep->add_option("--config", sweep_opt.config, "Experiment config file")->required();
    sweep->add_option("--seed", sweep_opt.seed, "Run only this seed");
    sweep->add_option("--out", sweep_opt.out, "Output directory");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Summarize a directory of metrics files");
    report->add_option("dir", report_dir, "Metrics directory");
    report->add_option("--out", report_dir, "Metrics directory");

    std::string inject;
    auto* selftest = app.add_subcommand("selftest", "Run the fast invariant suite");
    selftest->add_option("--inject", inject, "Deliberate defect for mutation checks")
        ->check(CLI::IsMember({"jsd_sign"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfigError;
    }

    if (*run) {
        return guarded([&] {
            ExperimentConfig cfg = load_config(run_opt.config);
            if (!run_opt.method.empty()) {
                try {
                    cfg.spec.method = parse_method(run_opt.method);
                } catch (const ContractError& e) {
                    throw ConfigError("method", e.what());
                }
            }
            return execute(cfg, {cfg.spec.method}, run_opt);
        });
    }
    if (*sweep) {
        return guarded([&] {
            ExperimentConfig cfg = load_config(sweep_opt.config);
            return execute(cfg,
                           {Method::codream, Method::centralized, Method::independent, Method::fedavg, Method::avgkd},
                           sweep_opt);
        });
    }
    if (*report) {
        return guarded([&] {
            if (report_dir.empty()) throw ConfigError("dir", "report needs a metrics directory");
            auto records = read_metrics_dir(report_dir);
            if (records.empty()) throw ConfigError("dir", "no metrics files in " + report_dir);
            return report_records(records, report_dir);
        });
    }
    if (*selftest) {
        if (inject == "jsd_sign") inject_fault(Fault::jsd_sign);
        bool ok = true;
        for (const auto& r : run_selftest()) {
            std::cout << (r.passed ? "PASS " : "FAIL ") << r.name;
            if (!r.passed) std::cout << ": " << r.detail;
            std::cout << '\n';
            ok = ok && r.passed;
        }
        return ok ? kOk : kFailure;
    }
    return kFailure;
}
