// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end tests of the fedsim binary: each case shells out to the real
// executable (path injected at build time) and inspects exit codes, stdout,
// and the files left behind.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "fedsim/fedsim.hpp"

namespace fs = std::filesystem;
using namespace fedsim;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("fedsim_test_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    REQUIRE(os.good());
    os << text;
}

/// Runs `fedsim <args>` with stdout+stderr captured into `capture`, returning
/// the process exit code.
int run_cli(const std::string& args, const fs::path& capture) {
    const std::string cmd =
        std::string(FEDSIM_CLI_PATH) + " " + args + " >'" + capture.string() + "' 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

const char* kSpecJson = R"({
    "version": 1,
    "name": "clids",
    "num_clients": 4,
    "min_samples": 12,
    "max_samples": 12,
    "num_classes": 2,
    "modalities": [{"name": "emb", "dim": 2, "max_len": 2, "kind": "embedding"}],
    "sep_scale": 1.5,
    "noise_scale": 0.2,
    "seed": 5
})";

/// A fast two-round config over an inline synthetic source (no "out": the
/// caller passes --out so each case gets its own directory).
const char* kRunConfig = R"({
    "version": 1,
    "name": "cli-exp",
    "synthetic": {
        "num_clients": 4, "min_samples": 12, "max_samples": 12, "num_classes": 2,
        "modalities": [{"name": "emb", "dim": 2, "max_len": 2, "kind": "embedding"}],
        "sep_scale": 1.5, "noise_scale": 0.2, "seed": 5
    },
    "strategy": {"lr": 0.1, "batch_size": 4},
    "model": {"hidden": 3, "conv_filters": [], "classifier_hidden": 4},
    "rounds": 2,
    "sample_rate": 0.5,
    "seeds": [1]
})";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

}  // namespace

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

TEST_CASE("cli synth writes a loadable dataset and is deterministic") {
    TempDir tmp;
    write_file(tmp.path / "spec.json", kSpecJson);
    const fs::path ds1 = tmp.path / "ds1";
    const fs::path ds2 = tmp.path / "ds2";

    REQUIRE(run_cli("synth '" + (tmp.path / "spec.json").string() + "' --out '" + ds1.string() +
                        "'",
                    tmp.path / "out1.txt") == 0);
    REQUIRE(slurp(tmp.path / "out1.txt").find("wrote 48 samples") != std::string::npos);
    REQUIRE(fs::exists(ds1 / "manifest.json"));
    REQUIRE(fs::exists(ds1 / "samples.jsonl"));

    Dataset ds = load_dataset(ds1.string());
    REQUIRE(ds.size() == 48);
    REQUIRE(ds.manifest().name == "clids");

    REQUIRE(run_cli("synth '" + (tmp.path / "spec.json").string() + "' --out '" + ds2.string() +
                        "'",
                    tmp.path / "out2.txt") == 0);
    REQUIRE(slurp(ds1 / "manifest.json") == slurp(ds2 / "manifest.json"));
    REQUIRE(slurp(ds1 / "samples.jsonl") == slurp(ds2 / "samples.jsonl"));
}

TEST_CASE("cli synth supports the binary sidecar and rejects bad specs") {
    TempDir tmp;
    write_file(tmp.path / "spec.json", kSpecJson);
    REQUIRE(run_cli("synth '" + (tmp.path / "spec.json").string() + "' --out '" +
                        (tmp.path / "dsb").string() + "' --binary",
                    tmp.path / "out.txt") == 0);
    REQUIRE(fs::exists(tmp.path / "dsb" / "samples.bin"));
    Dataset ds = load_dataset((tmp.path / "dsb").string());
    REQUIRE(ds.size() == 48);

    std::string bad = kSpecJson;
    bad.replace(bad.find("\"dim\": 2"), 8, "\"dim\": -2");
    write_file(tmp.path / "bad.json", bad);
    REQUIRE(run_cli("synth '" + (tmp.path / "bad.json").string() + "' --out '" +
                        (tmp.path / "dsx").string() + "'",
                    tmp.path / "err.txt") == 2);

    REQUIRE(run_cli("synth '" + (tmp.path / "nofile.json").string() + "' --out '" +
                        (tmp.path / "dsy").string() + "'",
                    tmp.path / "err2.txt") == 2);
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

TEST_CASE("cli run produces summary artifacts") {
    TempDir tmp;
    write_file(tmp.path / "cfg.json", kRunConfig);
    const fs::path out = tmp.path / "res";
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() + "' --out '" + out.string() + "'",
                    tmp.path / "out.txt") == 0);

    const std::string text = slurp(tmp.path / "out.txt");
    REQUIRE(text.find("acc:") != std::string::npos);
    REQUIRE(text.find("results in") != std::string::npos);

    SummaryFile s = load_summary(out / "summary.json");
    REQUIRE(s.name == "cli-exp");
    REQUIRE(s.strategy == "fedavg");
    REQUIRE(s.summary.count("acc") == 1);
    REQUIRE(fs::exists(out / "seed1" / "rounds.jsonl"));
    REQUIRE(fs::exists(out / "seed1" / "partition.json"));
    REQUIRE(fs::exists(out / "seed1" / "overlay.json"));
    REQUIRE(fs::exists(out / "seed1" / "checkpoint.bin"));
}

TEST_CASE("cli run can read a dataset directory produced by synth") {
    TempDir tmp;
    write_file(tmp.path / "spec.json", kSpecJson);
    REQUIRE(run_cli("synth '" + (tmp.path / "spec.json").string() + "' --out '" +
                        (tmp.path / "ds").string() + "'",
                    tmp.path / "s.txt") == 0);

    const std::string cfg = std::string(R"({"version":1,"dataset":")") +
                            (tmp.path / "ds").string() +
                            R"(","strategy":{"lr":0.1,"batch_size":4},)"
                            R"("model":{"hidden":3,"conv_filters":[],"classifier_hidden":4},)"
                            R"("rounds":1,"sample_rate":0.5,"seeds":[1]})";
    write_file(tmp.path / "cfg.json", cfg);
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() + "' --out '" +
                        (tmp.path / "res").string() + "'",
                    tmp.path / "out.txt") == 0);
    SummaryFile s = load_summary(tmp.path / "res" / "summary.json");
    REQUIRE(s.dataset == "clids");
}

TEST_CASE("cli run override --rounds 0 logs only the baseline") {
    TempDir tmp;
    write_file(tmp.path / "cfg.json", kRunConfig);
    const fs::path out = tmp.path / "res";
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() + "' --rounds 0 --out '" +
                        out.string() + "'",
                    tmp.path / "out.txt") == 0);
    const std::string log = slurp(out / "seed1" / "rounds.jsonl");
    std::size_t lines = 0;
    for (char ch : log)
        if (ch == '\n') ++lines;
    REQUIRE(lines == 1);
    REQUIRE(log.find("\"train_loss\":null") != std::string::npos);
}

TEST_CASE("cli run fedprox at zero mu matches fedavg") {
    TempDir tmp;
    write_file(tmp.path / "cfg.json", kRunConfig);
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() + "' --out '" +
                        (tmp.path / "avg").string() + "'",
                    tmp.path / "o1.txt") == 0);
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() +
                        "' --strategy fedprox --mu 0.0 --out '" + (tmp.path / "prox").string() +
                        "'",
                    tmp.path / "o2.txt") == 0);

    SummaryFile a = load_summary(tmp.path / "avg" / "summary.json");
    SummaryFile p = load_summary(tmp.path / "prox" / "summary.json");
    REQUIRE(p.strategy == "fedprox");
    REQUIRE(a.summary.size() == p.summary.size());
    for (const auto& [key, rs] : a.summary) {
        REQUIRE(p.summary.count(key) == 1);
        REQUIRE(p.summary.at(key).mean == rs.mean);
        REQUIRE(p.summary.at(key).std_dev == rs.std_dev);
    }
}

TEST_CASE("cli run distinguishes config errors from runtime failures") {
    TempDir tmp;
    // Unknown key: validation failure, exit 2.
    std::string bad = kRunConfig;
    bad.insert(bad.rfind('}'), R"(, "turbo": true)");
    write_file(tmp.path / "bad.json", bad);
    REQUIRE(run_cli("run '" + (tmp.path / "bad.json").string() + "' --out '" +
                        (tmp.path / "x").string() + "'",
                    tmp.path / "e1.txt") == 2);
    REQUIRE(slurp(tmp.path / "e1.txt").find("config error") != std::string::npos);

    // Missing config file: exit 2.
    REQUIRE(run_cli("run '" + (tmp.path / "absent.json").string() + "' --out '" +
                        (tmp.path / "y").string() + "'",
                    tmp.path / "e2.txt") == 2);

    // No output directory anywhere: exit 2.
    write_file(tmp.path / "cfg.json", kRunConfig);
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() + "'", tmp.path / "e3.txt") == 2);

    // Config is fine but the dataset directory is missing: runtime, exit 1.
    const std::string gone = std::string(R"({"version":1,"dataset":")") +
                             (tmp.path / "nodir").string() + R"(","seeds":[1],"rounds":1})";
    write_file(tmp.path / "gone.json", gone);
    REQUIRE(run_cli("run '" + (tmp.path / "gone.json").string() + "' --out '" +
                        (tmp.path / "z").string() + "'",
                    tmp.path / "e4.txt") == 1);
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

TEST_CASE("cli sweep writes the csv grid with a zero relative baseline") {
    TempDir tmp;
    write_file(tmp.path / "cfg.json", kRunConfig);
    const fs::path out = tmp.path / "sw";
    REQUIRE(run_cli("sweep '" + (tmp.path / "cfg.json").string() +
                        "' --axis q --values 0 --rounds 1 --out '" + out.string() + "'",
                    tmp.path / "out.txt") == 0);

    const fs::path csv = out / "sweep_q.csv";
    REQUIRE(fs::exists(csv));
    std::istringstream is(slurp(csv));
    std::string header_line, row_line;
    REQUIRE(std::getline(is, header_line));
    REQUIRE(std::getline(is, row_line));
    const auto header = split_csv_line(header_line);
    const auto row = split_csv_line(row_line);
    REQUIRE(header.size() == row.size());
    REQUIRE(header[0] == "q");
    REQUIRE(row[0] == "0");
    REQUIRE(row[1] == "ok");
    bool saw_rel = false;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c].size() > 4 && header[c].substr(header[c].size() - 4) == "_rel") {
            saw_rel = true;
            REQUIRE(row[c] == "0");  // the baseline's change against itself
        }
    }
    REQUIRE(saw_rel);
    REQUIRE(fs::exists(out / "q_0" / "summary.json"));
}

TEST_CASE("cli sweep validates the axis and the value grid") {
    TempDir tmp;
    write_file(tmp.path / "cfg.json", kRunConfig);
    REQUIRE(run_cli("sweep '" + (tmp.path / "cfg.json").string() +
                        "' --axis v --values 0 --out '" + (tmp.path / "a").string() + "'",
                    tmp.path / "e1.txt") == 2);
    REQUIRE(run_cli("sweep '" + (tmp.path / "cfg.json").string() +
                        "' --axis q --values 0,1.5 --out '" + (tmp.path / "b").string() + "'",
                    tmp.path / "e2.txt") == 2);
    REQUIRE(run_cli("sweep '" + (tmp.path / "cfg.json").string() + "' --axis q --out '" +
                        (tmp.path / "c").string() + "'",
                    tmp.path / "e3.txt") == 2);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

TEST_CASE("cli report tabulates summaries and flags missing ones") {
    TempDir tmp;
    write_file(tmp.path / "cfg.json", kRunConfig);
    const fs::path res = tmp.path / "res";
    REQUIRE(run_cli("run '" + (tmp.path / "cfg.json").string() + "' --rounds 1 --out '" +
                        res.string() + "'",
                    tmp.path / "r.txt") == 0);
    fs::create_directories(tmp.path / "empty");

    const fs::path csv = tmp.path / "report.csv";
    REQUIRE(run_cli("report '" + res.string() + "' '" + (tmp.path / "empty").string() +
                        "' --csv '" + csv.string() + "'",
                    tmp.path / "out.txt") == 0);

    const std::string table = slurp(tmp.path / "out.txt");
    REQUIRE(table.find("cli-exp") != std::string::npos);
    REQUIRE(table.find("absent") != std::string::npos);

    // The CSV repeats the table, and its metric cells match the summary file.
    SummaryFile s = load_summary(res / "summary.json");
    char expect[64];
    std::snprintf(expect, sizeof expect, "%.4f +/- %.4f", s.summary.at("acc").mean,
                  s.summary.at("acc").std_dev);
    const std::string csv_text = slurp(csv);
    REQUIRE(csv_text.find("cli-exp") != std::string::npos);
    REQUIRE(csv_text.find(expect) != std::string::npos);
    REQUIRE(csv_text.find("absent") != std::string::npos);
}
