// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

/// Noise-emulation knobs. q/l/e draw per-sample Bernoulli/categorical events;
/// s shapes the label-flip transition matrix. Rates live in [0,1] except e,
/// which must leave the diagonal positive, and s, which must keep >= 1 flip
/// target.
struct CorruptionConfig {
    double missing_modality = 0.0; // q
    double missing_label = 0.0;    // l
    double label_error = 0.0;      // e
    double sparsity = 0.4;         // s
    std::uint64_t seed = 0;

    void validate() const {
        if (missing_modality < 0.0 || missing_modality > 1.0)
            throw ConfigError("corruption: missing_modality must lie in [0,1]");
        if (missing_label < 0.0 || missing_label > 1.0)
            throw ConfigError("corruption: missing_label must lie in [0,1]");
        if (label_error < 0.0 || label_error >= 1.0)
            throw ConfigError("corruption: label_error must lie in [0,1)");
        if (sparsity < 0.0 || sparsity >= 1.0)
            throw ConfigError("corruption: sparsity must lie in [0,1)");
    }

    bool any() const {
        return missing_modality > 0.0 || missing_label > 0.0 || label_error > 0.0;
    }
};

/// Row-stochastic label-confusion matrix: q_().at(i, j) = P(observed j | true i).
struct TransitionMatrix {
    Tensor q; // [C, C]

    std::size_t num_classes() const { return q.extent(0); }

    void validate() const {
        if (q.rank() != 2 || q.extent(0) != q.extent(1))
            throw SchemaError("transition matrix must be square, got " + q.shape_string());
        for (std::size_t i = 0; i < q.extent(0); ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < q.extent(1); ++j) {
                if (q.at(i, j) < 0.0)
                    throw SchemaError("transition matrix has a negative entry at row " +
                                      std::to_string(i));
                row += q.at(i, j);
            }
            if (std::abs(row - 1.0) > 1e-12)
                throw SchemaError("transition matrix row " + std::to_string(i) +
                                  " sums to " + std::to_string(row) + ", expected 1");
        }
    }
};

/// Number of distinct wrong labels each class can map to under sparsity s.
inline std::size_t transition_fanout(std::size_t num_classes, double sparsity) {
    const long k = std::lround((1.0 - sparsity) * static_cast<double>(num_classes - 1));
    return static_cast<std::size_t>(std::max(1L, k));
}

/// Per row i: diagonal 1−e; k = max(1, round((1−s)(C−1))) distinct targets
/// j ≠ i drawn uniformly without replacement, each receiving e/k. Draw order:
/// rows ascend on one stream seeded with derive_stream(seed, kTransition).
inline TransitionMatrix build_transition_matrix(std::size_t num_classes, double e, double s,
                                                std::uint64_t seed) {
    if (num_classes < 2) throw ValueError("build_transition_matrix: need >= 2 classes");
    if (e < 0.0 || e >= 1.0) throw ValueError("build_transition_matrix: e must lie in [0,1)");
    if (s < 0.0 || s >= 1.0) throw ValueError("build_transition_matrix: s must lie in [0,1)");

    const std::size_t k = transition_fanout(num_classes, s);
    Rng rng(derive_stream(seed, streams::kTransition));
    TransitionMatrix t{Tensor({num_classes, num_classes})};
    for (std::size_t i = 0; i < num_classes; ++i) {
        t.q.at(i, i) = 1.0 - e;
        // targets index the off-diagonal slots 0..C-2, ascending after draw
        const auto targets = rng.sample_without_replacement(num_classes - 1, k);
        for (std::size_t slot : targets) {
            const std::size_t j = (slot < i) ? slot : slot + 1;
            t.q.at(i, j) = e / static_cast<double>(k);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Overlay view
// ---------------------------------------------------------------------------

/// Seeded corruption overlay over an immutable Dataset. Only availability and
/// observed labels are overridden, only for train-split samples; modality
/// values and the test split always come straight from the base dataset.
class CorruptedView {
public:
    explicit CorruptedView(const Dataset& dataset) : dataset_(&dataset) {
        available_.reserve(dataset.size());
        labels_.reserve(dataset.size());
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            available_.push_back(dataset[i].available);
            labels_.push_back(dataset[i].label);
        }
    }

    const Dataset& dataset() const { return *dataset_; }

    bool is_available(std::size_t i, std::size_t modality) const {
        return available_[i][modality];
    }
    const std::vector<bool>& availability(std::size_t i) const { return available_[i]; }
    std::optional<int> observed_label(std::size_t i) const { return labels_[i]; }

    bool any_modality_available(std::size_t i) const {
        for (bool a : available_[i])
            if (a) return true;
        return false;
    }

    /// Usable for supervised local training: an observed label plus at least
    /// one surviving modality.
    bool trainable(std::size_t i) const {
        return labels_[i].has_value() && any_modality_available(i);
    }

    // Mutators are package-internal: the apply_* free functions below and
    // overlay import are the only intended writers.
    void set_available(std::size_t i, std::size_t modality, bool v) { available_[i][modality] = v; }
    void set_label(std::size_t i, std::optional<int> v) { labels_[i] = std::move(v); }

private:
    const Dataset* dataset_;
    std::vector<std::vector<bool>> available_;
    std::vector<std::optional<int>> labels_;
};

/// Bernoulli(q) per (train sample, modality): one draw per slot, samples in
/// ascending index order, modalities in manifest order; a hit marks the slot
/// unavailable on top of whatever the base dataset says.
inline CorruptedView apply_missing_modalities(CorruptedView view, double q, std::uint64_t seed) {
    if (q < 0.0 || q > 1.0) throw ValueError("apply_missing_modalities: q must lie in [0,1]");
    Rng rng(derive_stream(seed, streams::kMissingModality));
    const Dataset& ds = view.dataset();
    const std::size_t M = ds.manifest().modalities.size();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds[i].split != Split::Train) continue;
        for (std::size_t m = 0; m < M; ++m)
            if (rng.bernoulli(q)) view.set_available(i, m, false);
    }
    return view;
}

/// Bernoulli(l) per train sample, ascending index order; a hit erases the
/// observed label.
inline CorruptedView apply_missing_labels(CorruptedView view, double l, std::uint64_t seed) {
    if (l < 0.0 || l > 1.0) throw ValueError("apply_missing_labels: l must lie in [0,1]");
    Rng rng(derive_stream(seed, streams::kMissingLabel));
    const Dataset& ds = view.dataset();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds[i].split != Split::Train) continue;
        if (rng.bernoulli(l)) view.set_label(i, std::nullopt);
    }
    return view;
}

/// Resample each still-labeled train sample's observed label from the matrix
/// row of its TRUE (base dataset) label: ascending index order, one uniform()
/// spent per labeled sample on a cumulative walk along the row.
inline CorruptedView apply_erroneous_labels(CorruptedView view, const TransitionMatrix& t,
                                            std::uint64_t seed) {
    const Dataset& ds = view.dataset();
    if (t.num_classes() != ds.manifest().num_classes)
        throw SchemaError("apply_erroneous_labels: matrix is " + t.q.shape_string() +
                          " but the dataset has " + std::to_string(ds.manifest().num_classes) +
                          " classes");
    t.validate();
    Rng rng(derive_stream(seed, streams::kErroneousLabel));
    const std::size_t C = t.num_classes();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds[i].split != Split::Train || !view.observed_label(i)) continue;
        if (!ds[i].label)
            throw ContractError("apply_erroneous_labels: sample '" + ds[i].id +
                                "' has an observed label but no true label");
        const auto row = static_cast<std::size_t>(*ds[i].label);
        const double u = rng.uniform();
        double cum = 0.0;
        std::size_t j = 0;
        for (; j + 1 < C; ++j) {
            cum += t.q.at(row, j);
            if (u < cum) break;
        }
        view.set_label(i, static_cast<int>(j));
    }
    return view;
}

/// Full q → l → e pipeline with per-stage streams derived from config.seed.
inline CorruptedView apply_corruption(const Dataset& dataset, const CorruptionConfig& config) {
    config.validate();
    CorruptedView view(dataset);
    if (config.missing_modality > 0.0)
        view = apply_missing_modalities(std::move(view), config.missing_modality, config.seed);
    if (config.missing_label > 0.0)
        view = apply_missing_labels(std::move(view), config.missing_label, config.seed);
    if (config.label_error > 0.0) {
        const auto t = build_transition_matrix(dataset.manifest().num_classes, config.label_error,
                                               config.sparsity, config.seed);
        view = apply_erroneous_labels(std::move(view), t, config.seed);
    }
    return view;
}

} // namespace fedsim
