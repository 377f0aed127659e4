// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedsim/corruption.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/dataset_io.hpp"
#include "fedsim/error.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/partition.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Partition replay files: client_id -> sample ids, so a run can be replayed
// without recomputing the draw.
// ---------------------------------------------------------------------------

inline void save_partition(const ClientPartition& partition, const Dataset& dataset,
                           const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    std::string out = "{\"version\":1,\"kind\":";
    detail::append_json_string(out,
                               partition.provenance.kind == PartitionKind::Natural ? "natural"
                                                                                   : "dirichlet");
    if (partition.provenance.kind == PartitionKind::Dirichlet) {
        out += ",\"alpha\":" + render_g10(partition.provenance.alpha);
        out += ",\"seed\":" + std::to_string(partition.provenance.seed);
    }
    out += ",\"clients\":{";
    bool first_client = true;
    for (const auto& [cid, indices] : partition.clients) { // std::map: sorted ids
        if (!first_client) out += ',';
        first_client = false;
        detail::append_json_string(out, cid);
        out += ":[";
        for (std::size_t k = 0; k < indices.size(); ++k) {
            if (k > 0) out += ',';
            detail::append_json_string(out, dataset[indices[k]].id);
        }
        out += ']';
    }
    out += "}}";
    os << out << '\n';
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

namespace detail {

inline std::map<std::string, std::size_t> index_by_id(const Dataset& dataset) {
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_id[dataset[i].id] = i;
    return by_id;
}

} // namespace detail

inline ClientPartition load_partition(const Dataset& dataset, const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    try {
        detail::reject_unknown_keys(j, {"version", "kind", "alpha", "seed", "clients"},
                                    "partition file");
        if (j.value("version", 0) != 1)
            throw SchemaError("partition file: unsupported version (expected 1)");
        ClientPartition part;
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "natural") part.provenance.kind = PartitionKind::Natural;
        else if (kind == "dirichlet") part.provenance.kind = PartitionKind::Dirichlet;
        else throw SchemaError("partition file: unknown kind '" + kind + "'");
        part.provenance.alpha = j.value("alpha", 0.0);
        part.provenance.seed = j.value("seed", std::uint64_t{0});
        const auto by_id = detail::index_by_id(dataset);
        for (const auto& [cid, ids] : j.at("clients").items()) {
            std::vector<std::size_t>& cell = part.clients[cid];
            for (const auto& sid : ids) {
                const auto it = by_id.find(sid.get<std::string>());
                if (it == by_id.end())
                    throw SchemaError("partition file: unknown sample id '" +
                                      sid.get<std::string>() + "'");
                cell.push_back(it->second);
            }
        }
        return part;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Corruption-overlay replay files: sample id -> availability flags and the
// observed label. The whole view state is dumped; the base dataset is never
// touched.
// ---------------------------------------------------------------------------

inline void save_overlay(const CorruptedView& view, const std::filesystem::path& path) {
    const Dataset& dataset = view.dataset();
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    std::string out = "{\"version\":1,\"samples\":{";
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (i > 0) out += ',';
        detail::append_json_string(out, dataset[i].id);
        out += ":{\"available\":[";
        const std::size_t n_mod = dataset.manifest().modalities.size();
        for (std::size_t m = 0; m < n_mod; ++m) {
            if (m > 0) out += ',';
            out += view.is_available(i, m) ? "true" : "false";
        }
        out += "],\"label\":";
        const std::optional<int> label = view.observed_label(i);
        out += label ? std::to_string(*label) : "null";
        out += '}';
    }
    out += "}}";
    os << out << '\n';
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline CorruptedView load_overlay(const Dataset& dataset, const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    try {
        detail::reject_unknown_keys(j, {"version", "samples"}, "overlay file");
        if (j.value("version", 0) != 1)
            throw SchemaError("overlay file: unsupported version (expected 1)");
        CorruptedView view(dataset);
        const auto by_id = detail::index_by_id(dataset);
        const std::size_t n_mod = dataset.manifest().modalities.size();
        for (const auto& [sid, rec] : j.at("samples").items()) {
            const auto it = by_id.find(sid);
            if (it == by_id.end())
                throw SchemaError("overlay file: unknown sample id '" + sid + "'");
            detail::reject_unknown_keys(rec, {"available", "label"}, "overlay record");
            const auto& avail = rec.at("available");
            if (avail.size() != n_mod)
                throw SchemaError("overlay file: sample '" + sid + "' has " +
                                  std::to_string(avail.size()) + " availability flags, expected " +
                                  std::to_string(n_mod));
            for (std::size_t m = 0; m < n_mod; ++m) {
                const bool v = avail.at(m).get<bool>();
                if (v && !dataset[it->second].available[m])
                    throw SchemaError("overlay file: sample '" + sid +
                                      "' marks a base-missing modality available");
                view.set_available(it->second, m, v);
            }
            if (rec.at("label").is_null()) {
                view.set_label(it->second, std::nullopt);
            } else {
                const int label = rec.at("label").get<int>();
                if (label < 0 || static_cast<std::size_t>(label) >= dataset.manifest().num_classes)
                    throw SchemaError("overlay file: sample '" + sid + "' label out of range");
                view.set_label(it->second, label);
            }
        }
        return view;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Round log rendering: one self-contained JSON record per line with a fixed
// key order, so equal runs produce byte-equal logs.
// ---------------------------------------------------------------------------

inline std::string render_round_record(const RoundReport& report, const std::string& strategy) {
    std::string out = "{\"round\":" + std::to_string(report.round);
    out += ",\"strategy\":";
    detail::append_json_string(out, strategy);
    out += ",\"cohort\":[";
    for (std::size_t k = 0; k < report.cohort.size(); ++k) {
        if (k > 0) out += ',';
        detail::append_json_string(out, report.cohort[k]);
    }
    out += "],\"cohort_size\":" + std::to_string(report.cohort.size());
    out += ",\"diverged\":[";
    for (std::size_t k = 0; k < report.diverged.size(); ++k) {
        if (k > 0) out += ',';
        detail::append_json_string(out, report.diverged[k]);
    }
    out += "],\"train_loss\":";
    out += report.cohort.empty() ? "null" : render_g10(report.mean_train_loss);
    out += ",\"metrics\":{";
    bool first = true;
    for (const auto& [key, value] : report.test_metrics) { // std::map: sorted keys
        if (!first) out += ',';
        first = false;
        detail::append_json_string(out, key);
        out += ':' + render_g10(value);
    }
    out += "}}";
    return out;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct PartitionConfig {
    PartitionKind kind = PartitionKind::Natural;
    double alpha = 0.1;       // dirichlet only
    std::size_t clients = 0;  // dirichlet only

    void validate() const {
        if (kind == PartitionKind::Dirichlet) {
            if (!(alpha > 0.0)) throw ConfigError("partition: alpha must be > 0");
            if (clients < 1) throw ConfigError("partition: dirichlet needs clients >= 1");
        }
    }
};

/// Everything one experiment needs: a data source (a dataset directory or an
/// inline synthetic spec — exactly one), partition and corruption settings,
/// the strategy and model, and the run protocol (N seeds, or K folds with a
/// single seed).
struct ExperimentConfig {
    std::string name = "experiment";
    std::string dataset_dir;               // exclusive with `synthetic`
    std::optional<SyntheticSpec> synthetic;
    PartitionConfig partition;
    CorruptionConfig corruption; // its seed field is overwritten per run
    StrategyConfig strategy;
    ModelConfig model;
    std::string unimodal; // non-empty: restrict the model to this modality
    std::size_t rounds = 200;
    double sample_rate = 0.1;
    std::vector<std::uint64_t> seeds = {0};
    std::size_t folds = 0; // > 0 switches to the cross-validation protocol
    std::size_t workers = 0;
    std::string out_dir; // empty: in-memory only

    void validate() const {
        if (dataset_dir.empty() == !synthetic.has_value())
            throw ConfigError("experiment: exactly one of dataset/synthetic must be given");
        partition.validate();
        corruption.validate();
        strategy.validate();
        model.validate();
        if (!(sample_rate > 0.0 && sample_rate <= 1.0))
            throw ConfigError("experiment: sample_rate must lie in (0,1]");
        if (folds == 1) throw ConfigError("experiment: folds must be 0 or >= 2");
        if (folds == 0 && seeds.empty())
            throw ConfigError("experiment: at least one seed required");
        if (folds > 0 && seeds.size() > 1)
            throw ConfigError("experiment: the fold protocol takes at most one seed");
    }
};

// ---------------------------------------------------------------------------
// Config files: versioned JSON, unknown keys rejected. All violations raise
// ConfigError so the front end can map them to its validation exit code.
// ---------------------------------------------------------------------------

namespace detail {

inline void cfg_reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                               const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

} // namespace detail

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    detail::cfg_reject_unknown(j,
                               {"version", "name", "num_clients", "min_samples", "max_samples",
                                "num_classes", "modalities", "sep_scale", "noise_scale",
                                "train_fraction", "seed"},
                               "synthetic spec");
    try {
        if (j.contains("version") && j.at("version").get<int>() != 1)
            throw ConfigError("synthetic spec: unsupported version (expected 1)");
        SyntheticSpec spec;
        spec.name = j.value("name", spec.name);
        spec.num_clients = j.value("num_clients", spec.num_clients);
        spec.min_samples_per_client = j.value("min_samples", spec.min_samples_per_client);
        spec.max_samples_per_client = j.value("max_samples", spec.max_samples_per_client);
        spec.num_classes = j.value("num_classes", spec.num_classes);
        spec.sep_scale = j.value("sep_scale", spec.sep_scale);
        spec.noise_scale = j.value("noise_scale", spec.noise_scale);
        spec.train_fraction = j.value("train_fraction", spec.train_fraction);
        spec.seed = j.value("seed", spec.seed);
        if (!j.contains("modalities"))
            throw ConfigError("synthetic spec: 'modalities' is required");
        for (const auto& jm : j.at("modalities")) {
            detail::cfg_reject_unknown(jm, {"name", "dim", "max_len", "kind"},
                                       "synthetic spec modality");
            ModalitySpec m;
            m.name = jm.at("name").get<std::string>();
            if (jm.at("dim").get<long long>() < 0 || jm.at("max_len").get<long long>() < 0)
                throw ConfigError("synthetic spec: modality '" + m.name +
                                  "' extents must be non-negative");
            m.dim = jm.at("dim").get<std::size_t>();
            m.max_len = jm.at("max_len").get<std::size_t>();
            if (jm.contains("kind"))
                m.kind = modality_kind_from_string(jm.at("kind").get<std::string>());
            spec.modalities.push_back(std::move(m));
        }
        spec.validate();
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
    } catch (const SchemaError& e) {
        throw ConfigError(e.what());
    }
}

inline SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (!j.contains("version")) throw ConfigError(path.string() + ": missing 'version'");
    return synthetic_spec_from_json(j);
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    detail::cfg_reject_unknown(j,
                               {"version", "name", "dataset", "synthetic", "partition",
                                "corruption", "strategy", "model", "unimodal", "rounds",
                                "sample_rate", "seeds", "folds", "workers", "out"},
                               "experiment config");
    try {
        if (j.value("version", 0) != 1)
            throw ConfigError("experiment config: unsupported version (expected 1)");
        ExperimentConfig cfg;
        cfg.name = j.value("name", cfg.name);
        if (j.contains("dataset")) cfg.dataset_dir = j.at("dataset").get<std::string>();
        if (j.contains("synthetic")) cfg.synthetic = synthetic_spec_from_json(j.at("synthetic"));
        if (j.contains("partition")) {
            const auto& jp = j.at("partition");
            detail::cfg_reject_unknown(jp, {"kind", "alpha", "clients"}, "partition config");
            const auto kind = jp.at("kind").get<std::string>();
            if (kind == "natural") cfg.partition.kind = PartitionKind::Natural;
            else if (kind == "dirichlet") cfg.partition.kind = PartitionKind::Dirichlet;
            else throw ConfigError("partition config: unknown kind '" + kind + "'");
            cfg.partition.alpha = jp.value("alpha", cfg.partition.alpha);
            cfg.partition.clients = jp.value("clients", cfg.partition.clients);
        }
        if (j.contains("corruption")) {
            const auto& jc = j.at("corruption");
            detail::cfg_reject_unknown(
                jc, {"missing_modality", "missing_label", "label_error", "sparsity"},
                "corruption config");
            cfg.corruption.missing_modality =
                jc.value("missing_modality", cfg.corruption.missing_modality);
            cfg.corruption.missing_label = jc.value("missing_label", cfg.corruption.missing_label);
            cfg.corruption.label_error = jc.value("label_error", cfg.corruption.label_error);
            cfg.corruption.sparsity = jc.value("sparsity", cfg.corruption.sparsity);
        }
        if (j.contains("strategy")) {
            const auto& js = j.at("strategy");
            detail::cfg_reject_unknown(js,
                                       {"name", "lr", "local_epochs", "batch_size", "mu",
                                        "server_lr", "server_optimizer", "beta1", "beta2",
                                        "adam_eps", "alpha_rs"},
                                       "strategy config");
            if (js.contains("name"))
                cfg.strategy.name = strategy_from_string(js.at("name").get<std::string>());
            cfg.strategy.lr = js.value("lr", cfg.strategy.lr);
            cfg.strategy.local_epochs = js.value("local_epochs", cfg.strategy.local_epochs);
            cfg.strategy.batch_size = js.value("batch_size", cfg.strategy.batch_size);
            cfg.strategy.mu = js.value("mu", cfg.strategy.mu);
            cfg.strategy.server_lr = js.value("server_lr", cfg.strategy.server_lr);
            if (js.contains("server_optimizer"))
                cfg.strategy.server_opt =
                    server_optimizer_from_string(js.at("server_optimizer").get<std::string>());
            cfg.strategy.beta1 = js.value("beta1", cfg.strategy.beta1);
            cfg.strategy.beta2 = js.value("beta2", cfg.strategy.beta2);
            cfg.strategy.adam_eps = js.value("adam_eps", cfg.strategy.adam_eps);
            cfg.strategy.alpha_rs = js.value("alpha_rs", cfg.strategy.alpha_rs);
        }
        if (j.contains("model")) {
            const auto& jm = j.at("model");
            detail::cfg_reject_unknown(jm,
                                       {"fusion", "heads", "hidden", "conv_filters", "kernel",
                                        "stride", "dropout", "classifier_hidden"},
                                       "model config");
            if (jm.contains("fusion"))
                cfg.model.fusion.scheme = fusion_from_string(jm.at("fusion").get<std::string>());
            cfg.model.fusion.heads = jm.value("heads", cfg.model.fusion.heads);
            cfg.model.encoder.hidden = jm.value("hidden", cfg.model.encoder.hidden);
            if (jm.contains("conv_filters"))
                cfg.model.encoder.conv_filters =
                    jm.at("conv_filters").get<std::vector<std::size_t>>();
            cfg.model.encoder.kernel = jm.value("kernel", cfg.model.encoder.kernel);
            cfg.model.encoder.stride = jm.value("stride", cfg.model.encoder.stride);
            cfg.model.encoder.dropout = jm.value("dropout", cfg.model.encoder.dropout);
            cfg.model.classifier_hidden = jm.value("classifier_hidden", cfg.model.classifier_hidden);
        }
        cfg.unimodal = j.value("unimodal", cfg.unimodal);
        cfg.rounds = j.value("rounds", cfg.rounds);
        cfg.sample_rate = j.value("sample_rate", cfg.sample_rate);
        if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        cfg.folds = j.value("folds", cfg.folds);
        cfg.workers = j.value("workers", cfg.workers);
        cfg.out_dir = j.value("out", cfg.out_dir);
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Experiment execution
// ---------------------------------------------------------------------------

struct RunResult {
    std::string label;   // "seed7" or "fold2"
    std::uint64_t seed = 0;
    std::vector<RoundReport> rounds; // rounds[0] is the untrained round-0 baseline
    std::map<std::string, double> final_metrics;
    double final_train_loss = 0.0;
};

struct ExperimentResult {
    std::vector<RunResult> runs;
    std::map<std::string, RunSummary> summary; // over each run's final metrics
};

namespace detail {

/// Rebuilds the dataset with split tags matching one cross-validation fold;
/// the result behaves exactly like a predefined-protocol dataset downstream.
inline Dataset retag_fold(const Dataset& base, const Fold& fold) {
    DatasetManifest manifest = base.manifest();
    manifest.protocol = SplitProtocol::Predefined;
    manifest.folds = 0;
    std::vector<Sample> samples;
    samples.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) samples.push_back(base[i]);
    for (Sample& s : samples) s.split = Split::None;
    for (std::size_t i : fold.train_indices) samples[i].split = Split::Train;
    for (std::size_t i : fold.test_indices) samples[i].split = Split::Test;
    return Dataset(std::move(manifest), std::move(samples));
}

inline std::string fusion_label(const ExperimentConfig& config) {
    if (!config.unimodal.empty()) return "unimodal:" + config.unimodal;
    return to_string(config.model.fusion.scheme);
}

} // namespace detail

/// Runs one seed/fold end to end. When `out` is non-empty the run directory
/// receives partition.json, overlay.json, an incrementally flushed
/// rounds.jsonl (so partial results survive an abort), and checkpoint.bin.
inline RunResult run_single(const ExperimentConfig& config, const Dataset& data,
                            std::uint64_t seed, const std::string& label,
                            const std::filesystem::path& out) {
    ClientPartition partition =
        config.partition.kind == PartitionKind::Natural
            ? partition_natural(data)
            : partition_dirichlet(data, config.partition.alpha, config.partition.clients, seed);

    CorruptionConfig corruption = config.corruption;
    corruption.seed = seed;
    CorruptedView view = apply_corruption(data, corruption);

    MultimodalClassifier model =
        config.unimodal.empty()
            ? MultimodalClassifier(data.manifest(), config.model, seed)
            : MultimodalClassifier::build_unimodal(data.manifest(), config.model, config.unimodal,
                                                   seed);
    ServerState server = make_server_state(model.params(), config.strategy);
    std::map<std::string, ClientState> client_states;
    RoundConfig rc;
    rc.sample_rate = config.sample_rate;
    rc.master_seed = seed;
    rc.workers = config.workers;

    std::filesystem::path run_dir;
    std::ofstream log;
    if (!out.empty()) {
        run_dir = out / label;
        std::error_code ec;
        std::filesystem::create_directories(run_dir, ec);
        if (ec)
            throw IoError("cannot create directory '" + run_dir.string() + "': " + ec.message());
        save_partition(partition, data, run_dir / "partition.json");
        save_overlay(view, run_dir / "overlay.json");
        log.open(run_dir / "rounds.jsonl");
        if (!log) throw IoError("cannot open '" + (run_dir / "rounds.jsonl").string() + "'");
    }
    const std::string strategy_name = to_string(config.strategy.name);
    auto append_log = [&](const RoundReport& report) {
        if (!log.is_open()) return;
        log << render_round_record(report, strategy_name) << '\n' << std::flush;
        if (!log) throw IoError("failed writing round log in '" + run_dir.string() + "'");
    };

    RunResult run;
    run.label = label;
    run.seed = seed;

    RoundReport baseline; // round 0: the untrained model
    baseline.test_metrics = evaluate_model(model, data, data.test_indices()).metrics;
    append_log(baseline);
    run.rounds.push_back(std::move(baseline));

    for (std::size_t r = 0; r < config.rounds; ++r) {
        RoundReport report = run_round(model, server, client_states, partition, view,
                                       config.strategy, rc);
        append_log(report); // flushed per round: partial curves survive an abort
        run.rounds.push_back(std::move(report));
    }

    run.final_metrics = run.rounds.back().test_metrics;
    run.final_train_loss = run.rounds.back().mean_train_loss;
    if (!run_dir.empty()) save_params(server.global, (run_dir / "checkpoint.bin").string());
    return run;
}

inline void write_summary(const ExperimentResult& result, const ExperimentConfig& config,
                          const std::string& dataset_name, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    std::string out = "{\"version\":1,\"name\":";
    detail::append_json_string(out, config.name);
    out += ",\"dataset\":";
    detail::append_json_string(out, dataset_name);
    out += ",\"strategy\":";
    detail::append_json_string(out, to_string(config.strategy.name));
    out += ",\"fusion\":";
    detail::append_json_string(out, detail::fusion_label(config));
    out += ",\"rounds\":" + std::to_string(config.rounds);
    out += ",\"sample_rate\":" + render_g10(config.sample_rate);
    out += ",\"runs\":[";
    for (std::size_t k = 0; k < result.runs.size(); ++k) {
        const RunResult& run = result.runs[k];
        if (k > 0) out += ',';
        out += "{\"label\":";
        detail::append_json_string(out, run.label);
        out += ",\"seed\":" + std::to_string(run.seed);
        out += ",\"final\":{";
        bool first = true;
        for (const auto& [key, value] : run.final_metrics) {
            if (!first) out += ',';
            first = false;
            detail::append_json_string(out, key);
            out += ':' + render_g10(value);
        }
        out += "}}";
    }
    out += "],\"summary\":{";
    bool first = true;
    for (const auto& [key, s] : result.summary) {
        if (!first) out += ',';
        first = false;
        detail::append_json_string(out, key);
        out += ":{\"mean\":" + render_g10(s.mean) + ",\"std\":" + render_g10(s.std_dev) + "}";
    }
    out += "}}";
    os << out << '\n';
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

/// Parsed form of a summary file, as much as the report renderer needs.
struct SummaryFile {
    std::string name;
    std::string dataset;
    std::string strategy;
    std::string fusion;
    std::map<std::string, RunSummary> summary;
};

inline SummaryFile load_summary(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    try {
        detail::reject_unknown_keys(j,
                                    {"version", "name", "dataset", "strategy", "fusion", "rounds",
                                     "sample_rate", "runs", "summary"},
                                    "summary file");
        if (j.value("version", 0) != 1)
            throw SchemaError("summary file: unsupported version (expected 1)");
        SummaryFile s;
        s.name = j.at("name").get<std::string>();
        s.dataset = j.at("dataset").get<std::string>();
        s.strategy = j.at("strategy").get<std::string>();
        s.fusion = j.at("fusion").get<std::string>();
        for (const auto& [key, js] : j.at("summary").items()) {
            RunSummary rs;
            rs.mean = js.at("mean").get<double>();
            rs.std_dev = js.at("std").get<double>();
            s.summary[key] = rs;
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

/// Executes every seed (or fold), collecting per-round curves and the
/// cross-run mean/std of each final metric. With an output directory set,
/// each run writes its artifacts as it goes and the experiment finishes with
/// a summary.json.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    const Dataset base = config.synthetic ? generate_synthetic(*config.synthetic)
                                          : load_dataset(config.dataset_dir);
    const std::uint64_t fold_seed = config.seeds.empty() ? 0 : config.seeds[0];
    std::vector<Fold> folds;
    if (config.folds > 0) folds = split_kfold(base, config.folds, fold_seed);

    const std::filesystem::path out = config.out_dir;
    if (!out.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out, ec);
        if (ec) throw IoError("cannot create directory '" + out.string() + "': " + ec.message());
    }

    ExperimentResult result;
    const std::size_t num_runs = config.folds > 0 ? config.folds : config.seeds.size();
    for (std::size_t ri = 0; ri < num_runs; ++ri) {
        if (config.folds > 0) {
            const Dataset data = detail::retag_fold(base, folds[ri]);
            result.runs.push_back(
                run_single(config, data, fold_seed, "fold" + std::to_string(ri), out));
        } else {
            const std::uint64_t seed = config.seeds[ri];
            result.runs.push_back(
                run_single(config, base, seed, "seed" + std::to_string(seed), out));
        }
    }

    std::set<std::string> keys;
    for (const RunResult& run : result.runs)
        for (const auto& [key, _] : run.final_metrics) keys.insert(key);
    for (const std::string& key : keys) {
        std::vector<double> finals;
        for (const RunResult& run : result.runs) {
            const auto it = run.final_metrics.find(key);
            if (it != run.final_metrics.end()) finals.push_back(it->second);
        }
        result.summary[key] = summarize_runs(finals);
    }

    if (!out.empty()) write_summary(result, config, base.manifest().name, out / "summary.json");
    return result;
}

} // namespace fedsim
