// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: synth | run | sweep | report.
// Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedsim/fedsim.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// ---------------------------------------------------------------------------
// Shared flag overrides: every experiment-shaped command accepts the same
// knobs, applied on top of the config file.
// ---------------------------------------------------------------------------

struct Overrides {
    std::optional<double> alpha;
    std::optional<std::size_t> clients;
    std::optional<double> missing_modality;
    std::optional<double> missing_label;
    std::optional<double> label_error;
    std::optional<double> sparsity;
    std::optional<std::string> strategy;
    std::optional<std::string> fusion;
    std::optional<std::string> unimodal;
    std::optional<std::size_t> rounds;
    std::optional<double> sample_rate;
    std::optional<double> lr;
    std::optional<double> server_lr;
    std::optional<double> mu;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> folds;
    std::optional<std::string> out;
};

void add_override_flags(CLI::App& cmd, Overrides& o) {
    cmd.add_option("--alpha", o.alpha, "Dirichlet concentration (switches partition to dirichlet)");
    cmd.add_option("--clients", o.clients, "Dirichlet client count");
    cmd.add_option("--missing-modality", o.missing_modality, "Missing-modality rate q");
    cmd.add_option("--missing-label", o.missing_label, "Missing-label rate l");
    cmd.add_option("--label-error", o.label_error, "Erroneous-label rate e");
    cmd.add_option("--sparsity", o.sparsity, "Label-error transition sparsity s");
    cmd.add_option("--strategy", o.strategy, "fedavg|fedprox|scaffold|fedopt|fedrs");
    cmd.add_option("--fusion", o.fusion, "concat|attention");
    cmd.add_option("--unimodal", o.unimodal, "Restrict the model to one modality");
    cmd.add_option("--rounds", o.rounds, "Federated rounds");
    cmd.add_option("--sample-rate", o.sample_rate, "Client sample rate in (0,1]");
    cmd.add_option("--lr", o.lr, "Client learning rate");
    cmd.add_option("--server-lr", o.server_lr, "Server learning rate (fedopt)");
    cmd.add_option("--mu", o.mu, "Proximal weight (fedprox)");
    cmd.add_option("--seed", o.seed, "Replace the seed list with this one seed");
    cmd.add_option("--folds", o.folds, "Cross-validation fold count");
    cmd.add_option("--out", o.out, "Output directory");
}

void apply_overrides(fedsim::ExperimentConfig& cfg, const Overrides& o) {
    if (o.alpha) {
        cfg.partition.kind = fedsim::PartitionKind::Dirichlet;
        cfg.partition.alpha = *o.alpha;
    }
    if (o.clients) {
        cfg.partition.kind = fedsim::PartitionKind::Dirichlet;
        cfg.partition.clients = *o.clients;
    }
    if (o.missing_modality) cfg.corruption.missing_modality = *o.missing_modality;
    if (o.missing_label) cfg.corruption.missing_label = *o.missing_label;
    if (o.label_error) cfg.corruption.label_error = *o.label_error;
    if (o.sparsity) cfg.corruption.sparsity = *o.sparsity;
    if (o.strategy) cfg.strategy.name = fedsim::strategy_from_string(*o.strategy);
    if (o.fusion) cfg.model.fusion.scheme = fedsim::fusion_from_string(*o.fusion);
    if (o.unimodal) cfg.unimodal = *o.unimodal;
    if (o.rounds) cfg.rounds = *o.rounds;
    if (o.sample_rate) cfg.sample_rate = *o.sample_rate;
    if (o.lr) cfg.strategy.lr = *o.lr;
    if (o.server_lr) cfg.strategy.server_lr = *o.server_lr;
    if (o.mu) cfg.strategy.mu = *o.mu;
    if (o.seed) cfg.seeds = {*o.seed};
    if (o.folds) cfg.folds = *o.folds;
    if (o.out) cfg.out_dir = *o.out;
    cfg.validate();
}

// ---------------------------------------------------------------------------
// Plain-text table rendering
// ---------------------------------------------------------------------------

void print_table(const std::vector<std::vector<std::string>>& rows) {
    if (rows.empty()) return;
    std::vector<std::size_t> width;
    for (const auto& row : rows) {
        if (width.size() < row.size()) width.resize(row.size(), 0);
        for (std::size_t c = 0; c < row.size(); ++c)
            width[c] = std::max(width[c], row[c].size());
    }
    for (const auto& row : rows) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c > 0) line += "  ";
            line += row[c];
            line.append(width[c] - row[c].size(), ' ');
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        std::puts(line.c_str());
    }
}

void write_csv(const std::vector<std::vector<std::string>>& rows,
               const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw fedsim::IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& row : rows) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c > 0) line += ',';
            const bool quote = row[c].find_first_of(",\"\n") != std::string::npos;
            if (quote) {
                line += '"';
                for (char ch : row[c]) {
                    line += ch;
                    if (ch == '"') line += '"';
                }
                line += '"';
            } else {
                line += row[c];
            }
        }
        os << line << '\n';
    }
    if (!os) throw fedsim::IoError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out, bool binary) {
    const fedsim::SyntheticSpec spec = fedsim::load_synthetic_spec(spec_path);
    const fedsim::Dataset dataset = fedsim::generate_synthetic(spec);
    fedsim::save_dataset(dataset, out, binary);
    std::printf("wrote %zu samples (%zu modalities, %zu classes) to %s\n", dataset.size(),
                dataset.manifest().modalities.size(), dataset.manifest().num_classes,
                out.c_str());
    return kExitOk;
}

int cmd_run(const std::string& config_path, const Overrides& overrides) {
    fedsim::ExperimentConfig cfg = fedsim::load_experiment_config(config_path);
    apply_overrides(cfg, overrides);
    if (cfg.out_dir.empty())
        throw fedsim::ConfigError("run: an output directory is required (--out or config 'out')");
    const fedsim::ExperimentResult result = fedsim::run_experiment(cfg);
    for (const auto& [metric, s] : result.summary)
        std::printf("%s: %.6f +/- %.6f over %zu runs\n", metric.c_str(), s.mean, s.std_dev,
                    result.runs.size());
    std::printf("results in %s\n", cfg.out_dir.c_str());
    return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& axis,
              std::vector<double> values, const Overrides& overrides) {
    fedsim::ExperimentConfig base = fedsim::load_experiment_config(config_path);
    apply_overrides(base, overrides);
    if (base.out_dir.empty())
        throw fedsim::ConfigError("sweep: an output directory is required (--out or config 'out')");
    if (axis != "q" && axis != "l" && axis != "e")
        throw fedsim::ConfigError("sweep: axis must be one of q, l, e");
    if (values.empty()) throw fedsim::ConfigError("sweep: at least one value required");
    // The relative-change table always needs the value-0 baseline cell.
    bool has_zero = false;
    for (double v : values) has_zero = has_zero || v == 0.0;
    if (!has_zero) values.insert(values.begin(), 0.0);
    for (double v : values) {
        fedsim::CorruptionConfig probe = base.corruption;
        if (axis == "q") probe.missing_modality = v;
        else if (axis == "l") probe.missing_label = v;
        else probe.label_error = v;
        probe.validate(); // rejects out-of-range sweep values before any run
    }

    const std::filesystem::path out(base.out_dir);
    struct Cell {
        double value = 0.0;
        bool ok = false;
        std::map<std::string, fedsim::RunSummary> summary;
    };
    std::vector<Cell> cells;
    for (double v : values) {
        fedsim::ExperimentConfig cfg = base;
        if (axis == "q") cfg.corruption.missing_modality = v;
        else if (axis == "l") cfg.corruption.missing_label = v;
        else cfg.corruption.label_error = v;
        cfg.name = base.name + "/" + axis + "=" + fedsim::render_g10(v);
        cfg.out_dir = (out / (axis + "_" + fedsim::render_g10(v))).string();
        Cell cell;
        cell.value = v;
        try {
            cell.summary = fedsim::run_experiment(cfg).summary;
            cell.ok = true;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "cell %s=%s failed: %s\n", axis.c_str(),
                         fedsim::render_g10(v).c_str(), e.what());
        }
        cells.push_back(std::move(cell));
    }

    const Cell* baseline = nullptr;
    for (const Cell& c : cells)
        if (c.value == 0.0) baseline = &c;
    std::set<std::string> metrics;
    for (const Cell& c : cells)
        for (const auto& [key, _] : c.summary) metrics.insert(key);

    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header{axis, "status"};
    for (const std::string& m : metrics) {
        header.push_back(m + "_mean");
        header.push_back(m + "_std");
        header.push_back(m + "_rel");
    }
    rows.push_back(header);
    for (const Cell& c : cells) {
        std::vector<std::string> row{fedsim::render_g10(c.value), c.ok ? "ok" : "failed"};
        for (const std::string& m : metrics) {
            const auto it = c.summary.find(m);
            if (!c.ok || it == c.summary.end()) {
                row.insert(row.end(), {"-", "-", "-"});
                continue;
            }
            row.push_back(fedsim::render_g10(it->second.mean));
            row.push_back(fedsim::render_g10(it->second.std_dev));
            // Relative change versus the value-0 baseline of the same metric.
            std::string rel = "-";
            if (baseline && baseline->ok) {
                const auto base_it = baseline->summary.find(m);
                if (base_it != baseline->summary.end() && base_it->second.mean != 0.0)
                    rel = fedsim::render_g10((it->second.mean - base_it->second.mean) /
                                             base_it->second.mean);
            }
            row.push_back(std::move(rel));
        }
        rows.push_back(std::move(row));
    }
    print_table(rows);
    write_csv(rows, out / ("sweep_" + axis + ".csv"));
    std::printf("sweep table in %s\n", (out / ("sweep_" + axis + ".csv")).c_str());
    return kExitOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& csv_path) {
    std::set<std::string> metrics;
    struct Row {
        std::string dir;
        bool ok = false;
        fedsim::SummaryFile summary;
    };
    std::vector<Row> entries;
    for (const std::string& dir : dirs) {
        Row row;
        row.dir = dir;
        const std::filesystem::path path = std::filesystem::path(dir) / "summary.json";
        if (std::filesystem::exists(path)) {
            row.summary = fedsim::load_summary(path);
            row.ok = true;
            for (const auto& [key, _] : row.summary.summary) metrics.insert(key);
        }
        entries.push_back(std::move(row));
    }

    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header{"dataset", "strategy", "fusion", "name"};
    for (const std::string& m : metrics) header.push_back(m);
    rows.push_back(header);
    for (const Row& e : entries) {
        if (!e.ok) {
            std::vector<std::string> row{e.dir, "-", "-", "absent"};
            row.resize(header.size(), "-");
            rows.push_back(std::move(row));
            continue;
        }
        std::vector<std::string> row{e.summary.dataset, e.summary.strategy, e.summary.fusion,
                                     e.summary.name};
        for (const std::string& m : metrics) {
            const auto it = e.summary.summary.find(m);
            if (it == e.summary.summary.end()) {
                row.push_back("-");
            } else {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.4f +/- %.4f", it->second.mean,
                              it->second.std_dev);
                row.push_back(buf);
            }
        }
        rows.push_back(std::move(row));
    }
    print_table(rows);
    if (!csv_path.empty()) write_csv(rows, csv_path);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedsim: multimodal federated-learning simulation"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset from a spec file");
    std::string synth_spec, synth_out;
    bool synth_binary = false;
    synth->add_option("spec", synth_spec, "Synthetic spec JSON")->required();
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth->add_flag("--binary", synth_binary, "Store features in a float32 sidecar");

    auto* run = app.add_subcommand("run", "Run one experiment from a config file");
    std::string run_config;
    Overrides run_overrides;
    run->add_option("config", run_config, "Experiment config JSON")->required();
    add_override_flags(*run, run_overrides);

    auto* sweep = app.add_subcommand("sweep", "Sweep one corruption axis over a value grid");
    std::string sweep_config, sweep_axis;
    std::vector<double> sweep_values;
    Overrides sweep_overrides;
    sweep->add_option("config", sweep_config, "Experiment config JSON")->required();
    sweep->add_option("--axis", sweep_axis, "Corruption axis: q, l, or e")->required();
    sweep->add_option("--values", sweep_values, "Axis values (the 0 baseline is added if absent)")
        ->required()
        ->delimiter(',');
    add_override_flags(*sweep, sweep_overrides);

    auto* report = app.add_subcommand("report", "Tabulate summaries from result directories");
    std::vector<std::string> report_dirs;
    std::string report_csv;
    report->add_option("dirs", report_dirs, "Result directories")->required();
    report->add_option("--csv", report_csv, "Also write the table as CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*synth) return cmd_synth(synth_spec, synth_out, synth_binary);
        if (*run) return cmd_run(run_config, run_overrides);
        if (*sweep) return cmd_sweep(sweep_config, sweep_axis, sweep_values, sweep_overrides);
        return cmd_report(report_dirs, report_csv);
    } catch (const fedsim::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}
