// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class MetricKind { UAR, ACC, F1, AUC };

inline std::string to_string(MetricKind m) {
    switch (m) {
        case MetricKind::UAR: return "UAR";
        case MetricKind::ACC: return "ACC";
        case MetricKind::F1: return "F1";
        case MetricKind::AUC: return "AUC";
    }
    return "?";
}

inline MetricKind metric_from_string(const std::string& s) {
    if (s == "UAR") return MetricKind::UAR;
    if (s == "ACC") return MetricKind::ACC;
    if (s == "F1") return MetricKind::F1;
    if (s == "AUC") return MetricKind::AUC;
    throw SchemaError("unknown metric '" + s + "' (expected UAR, ACC, F1, or AUC)");
}

enum class SplitProtocol { Predefined, KFold };

/// Modality classes decide the encoder family: raw sequence signals go
/// through the convolutional front end, precomputed embedding sequences go
/// straight to the recurrent encoder.
enum class ModalityKind { Signal, Embedding };

struct ModalitySpec {
    std::string name;
    std::size_t dim = 0;
    std::size_t max_len = 0;
    ModalityKind kind = ModalityKind::Signal;
};

struct DatasetManifest {
    std::string name;
    std::vector<ModalitySpec> modalities;
    std::size_t num_classes = 0;
    SplitProtocol protocol = SplitProtocol::Predefined;
    std::size_t folds = 0; // meaningful when protocol == KFold
    MetricKind metric = MetricKind::ACC;

    void validate() const {
        if (num_classes < 2) throw SchemaError("manifest: num_classes must be >= 2");
        if (modalities.empty()) throw SchemaError("manifest: at least one modality required");
        std::set<std::string> seen;
        for (const auto& m : modalities) {
            if (m.name.empty()) throw SchemaError("manifest: modality with empty name");
            if (!seen.insert(m.name).second)
                throw SchemaError("manifest: duplicate modality '" + m.name + "'");
            if (m.dim == 0) throw SchemaError("manifest: modality '" + m.name + "' has dim 0");
            if (m.max_len == 0) throw SchemaError("manifest: modality '" + m.name + "' has max_len 0");
        }
        if (protocol == SplitProtocol::KFold && folds < 2)
            throw SchemaError("manifest: kfold protocol requires folds >= 2");
    }

    std::size_t modality_index(const std::string& name) const {
        for (std::size_t i = 0; i < modalities.size(); ++i)
            if (modalities[i].name == name) return i;
        throw SchemaError("unknown modality '" + name + "'");
    }
};

enum class Split { None, Train, Val, Test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::None: return "none";
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

/// One multimodal instance. Modality tensors are [T_m, D_m] in manifest
/// order; `available` runs parallel to them. A missing label is a sample
/// that exists but cannot join a supervised loss.
struct Sample {
    std::string id;
    std::string client_id;           // empty = no natural client
    std::optional<int> label;
    std::vector<Tensor> modalities;  // manifest order
    std::vector<bool> available;     // manifest order
    Split split = Split::None;
};

/// Immutable sample collection plus its manifest. All invariants are checked
/// once at construction; afterwards the dataset is freely shareable.
class Dataset {
public:
    Dataset(DatasetManifest manifest, std::vector<Sample> samples)
        : manifest_(std::move(manifest)), samples_(std::move(samples)) {
        manifest_.validate();
        std::set<std::string> ids;
        for (std::size_t i = 0; i < samples_.size(); ++i) {
            const Sample& s = samples_[i];
            if (!ids.insert(s.id).second)
                throw SchemaError("dataset: duplicate sample id '" + s.id + "'");
            if (s.modalities.size() != manifest_.modalities.size() ||
                s.available.size() != manifest_.modalities.size())
                throw SchemaError("dataset: sample '" + s.id + "' does not cover all manifest modalities");
            for (std::size_t m = 0; m < s.modalities.size(); ++m) {
                const auto& spec = manifest_.modalities[m];
                const Tensor& t = s.modalities[m];
                if (t.rank() != 2 || t.extent(1) != spec.dim)
                    throw SchemaError("dataset: sample '" + s.id + "' modality '" + spec.name +
                                      "' has shape " + t.shape_string() + ", expected [T, " +
                                      std::to_string(spec.dim) + "]");
                if (s.available[m] && t.extent(0) < 1)
                    throw SchemaError("dataset: sample '" + s.id + "' modality '" + spec.name +
                                      "' is available but empty");
                if (t.extent(0) > spec.max_len)
                    throw SchemaError("dataset: sample '" + s.id + "' modality '" + spec.name +
                                      "' exceeds max_len " + std::to_string(spec.max_len));
            }
            if (s.label && (*s.label < 0 || static_cast<std::size_t>(*s.label) >= manifest_.num_classes))
                throw SchemaError("dataset: sample '" + s.id + "' label " + std::to_string(*s.label) +
                                  " out of range [0, " + std::to_string(manifest_.num_classes) + ")");
            if (manifest_.protocol == SplitProtocol::Predefined && s.split == Split::None)
                throw SchemaError("dataset: sample '" + s.id +
                                  "' lacks a split tag under the predefined protocol");
        }
    }

    const DatasetManifest& manifest() const { return manifest_; }
    const std::vector<Sample>& samples() const { return samples_; }
    std::size_t size() const { return samples_.size(); }
    const Sample& operator[](std::size_t i) const { return samples_[i]; }

    std::vector<std::size_t> indices_of(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples_.size(); ++i)
            if (samples_[i].split == split) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> train_indices() const { return indices_of(Split::Train); }
    std::vector<std::size_t> test_indices() const { return indices_of(Split::Test); }

private:
    DatasetManifest manifest_;
    std::vector<Sample> samples_;
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Desk-scale class-conditional generator. Each (class, modality) pair gets a
/// mean vector with entries N(0, sep_scale^2); a sample repeats its class
/// mean every timestep plus N(0, noise_scale^2) noise.
struct SyntheticSpec {
    std::size_t num_clients = 10;
    std::size_t min_samples_per_client = 10;
    std::size_t max_samples_per_client = 10;
    std::size_t num_classes = 4;
    std::vector<ModalitySpec> modalities; // max_len doubles as the sequence length
    double sep_scale = 1.0;
    double noise_scale = 0.1;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    std::string name = "synthetic";

    void validate() const {
        if (num_clients == 0) throw ConfigError("synthetic spec: num_clients must be positive");
        if (min_samples_per_client == 0 || max_samples_per_client < min_samples_per_client)
            throw ConfigError("synthetic spec: invalid samples_per_client range");
        if (num_classes < 2) throw ConfigError("synthetic spec: num_classes must be >= 2");
        if (modalities.empty()) throw ConfigError("synthetic spec: at least one modality required");
        for (const auto& m : modalities)
            if (m.dim == 0 || m.max_len == 0)
                throw ConfigError("synthetic spec: modality '" + m.name + "' needs positive extents");
        if (sep_scale < 0.0 || noise_scale < 0.0)
            throw ConfigError("synthetic spec: scales must be non-negative");
        if (!(train_fraction > 0.0 && train_fraction <= 1.0))
            throw ConfigError("synthetic spec: train_fraction must lie in (0, 1]");
    }
};

/// Draw order (fixed, so equal seeds give bitwise-equal datasets): class
/// means first (class-major, modality-minor, coordinate order), then clients
/// in index order; per client one uniform_int for its sample count, then per
/// sample its modality noise in manifest order. Labels cycle through the
/// classes within each client; every ceil(1/(1-train_fraction))-ish position
/// is tagged test via the floor-crossing rule below.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(derive_stream(spec.seed, streams::kSynthetic));

    DatasetManifest manifest;
    manifest.name = spec.name;
    manifest.modalities = spec.modalities;
    manifest.num_classes = spec.num_classes;
    manifest.protocol = SplitProtocol::Predefined;
    manifest.metric = MetricKind::ACC;

    std::vector<std::vector<Tensor>> means(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        means[c].reserve(spec.modalities.size());
        for (const auto& m : spec.modalities) {
            Tensor mu({m.dim});
            for (std::size_t d = 0; d < m.dim; ++d) mu[d] = spec.sep_scale * rng.normal();
            means[c].push_back(std::move(mu));
        }
    }

    const double test_fraction = 1.0 - spec.train_fraction;
    std::vector<Sample> samples;
    char buf[64];
    for (std::size_t k = 0; k < spec.num_clients; ++k) {
        const std::size_t span = spec.max_samples_per_client - spec.min_samples_per_client + 1;
        const std::size_t n_k = spec.min_samples_per_client + rng.uniform_int(span);
        std::snprintf(buf, sizeof buf, "c%04zu", k);
        const std::string client(buf);
        for (std::size_t j = 0; j < n_k; ++j) {
            Sample s;
            std::snprintf(buf, sizeof buf, "%s_s%04zu", client.c_str(), j);
            s.id = buf;
            s.client_id = client;
            const int label = static_cast<int>(j % spec.num_classes);
            s.label = label;
            const bool is_test =
                std::floor(static_cast<double>(j + 1) * test_fraction) >
                std::floor(static_cast<double>(j) * test_fraction);
            s.split = is_test ? Split::Test : Split::Train;
            for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
                const auto& spec_m = spec.modalities[m];
                Tensor x({spec_m.max_len, spec_m.dim});
                const Tensor& mu = means[static_cast<std::size_t>(label)][m];
                for (std::size_t t = 0; t < spec_m.max_len; ++t)
                    for (std::size_t d = 0; d < spec_m.dim; ++d)
                        x.at(t, d) = mu[d] + spec.noise_scale * rng.normal();
                s.modalities.push_back(std::move(x));
                s.available.push_back(true);
            }
            samples.push_back(std::move(s));
        }
    }
    return Dataset(std::move(manifest), std::move(samples));
}

// ---------------------------------------------------------------------------
// K-fold splitting, client-wise: all of a client's samples land in one fold.
// ---------------------------------------------------------------------------

struct Fold {
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
};

inline std::vector<Fold> split_kfold(const Dataset& dataset, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ValueError("split_kfold: k must be >= 2");

    std::map<std::string, std::vector<std::size_t>> by_client;
    bool any_missing = false, any_present = false;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const std::string& cid = dataset[i].client_id;
        (cid.empty() ? any_missing : any_present) = true;
        // samples without client ids fold individually, keyed by sample id
        by_client[cid.empty() ? "\x01sample:" + dataset[i].id : cid].push_back(i);
    }
    if (any_missing && any_present)
        throw ContractError("split_kfold: mixed presence of client ids");

    std::vector<std::string> clients;
    clients.reserve(by_client.size());
    for (const auto& [cid, _] : by_client) clients.push_back(cid);
    if (clients.size() < k)
        throw InfeasiblePartitionError("split_kfold: " + std::to_string(clients.size()) +
                                       " clients cannot fill " + std::to_string(k) + " folds");

    Rng rng(derive_stream(seed, streams::kFold));
    rng.shuffle(clients);

    std::vector<Fold> folds(k);
    std::vector<std::vector<std::size_t>> fold_members(k);
    for (std::size_t i = 0; i < clients.size(); ++i) {
        for (std::size_t idx : by_client[clients[i]]) fold_members[i % k].push_back(idx);
    }
    for (std::size_t f = 0; f < k; ++f) {
        for (std::size_t g = 0; g < k; ++g) {
            auto& dst = (g == f) ? folds[f].test_indices : folds[f].train_indices;
            dst.insert(dst.end(), fold_members[g].begin(), fold_members[g].end());
        }
        std::sort(folds[f].train_indices.begin(), folds[f].train_indices.end());
        std::sort(folds[f].test_indices.begin(), folds[f].test_indices.end());
    }
    return folds;
}

} // namespace fedsim
