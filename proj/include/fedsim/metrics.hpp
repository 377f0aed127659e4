// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fedsim/error.hpp"

namespace fedsim {

namespace detail {

inline void require_paired(const std::vector<int>& predictions, const std::vector<int>& labels,
                           const char* op) {
    if (predictions.empty() || predictions.size() != labels.size())
        throw ContractError(std::string(op) + ": predictions and labels must be equal-length and non-empty");
}

/// Confusion counts over whatever class indices actually occur.
struct ClassCounts {
    std::map<int, std::size_t> tp, fp, fn, support;
};

inline ClassCounts tally(const std::vector<int>& predictions, const std::vector<int>& labels) {
    ClassCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        c.support[labels[i]]++;
        if (predictions[i] == labels[i]) {
            c.tp[labels[i]]++;
        } else {
            c.fn[labels[i]]++;
            c.fp[predictions[i]]++;
        }
    }
    return c;
}

} // namespace detail

/// Unweighted average recall over the classes present in `labels`.
inline double uar(const std::vector<int>& predictions, const std::vector<int>& labels) {
    detail::require_paired(predictions, labels, "uar");
    auto c = detail::tally(predictions, labels);
    double sum = 0.0;
    for (const auto& [cls, n] : c.support)
        sum += static_cast<double>(c.tp[cls]) / static_cast<double>(n);
    return sum / static_cast<double>(c.support.size());
}

inline double top1_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    detail::require_paired(predictions, labels, "top1_accuracy");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (predictions[i] == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Mean per-class F1 over classes present in `labels`. A class that is never
/// predicted but does occur contributes F1 = 0 (precision undefined → 0).
inline double macro_f1(const std::vector<int>& predictions, const std::vector<int>& labels) {
    detail::require_paired(predictions, labels, "macro_f1");
    auto c = detail::tally(predictions, labels);
    double sum = 0.0;
    for (const auto& [cls, n] : c.support) {
        const double tp = static_cast<double>(c.tp[cls]);
        const double denom = 2.0 * tp + static_cast<double>(c.fp[cls]) + static_cast<double>(c.fn[cls]);
        sum += (denom > 0.0) ? 2.0 * tp / denom : 0.0;
    }
    return sum / static_cast<double>(c.support.size());
}

/// Mann–Whitney AUC: P(score₊ > score₋) + ½·P(tie), computed via midranks in
/// O(n log n). Rank-based, so invariant under strictly monotone transforms.
inline double auc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty() || scores.size() != labels.size())
        throw ContractError("auc_binary: scores and labels must be equal-length and non-empty");
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : labels) {
        if (y == 0) ++n_neg;
        else if (y == 1) ++n_pos;
        else throw ValueError("auc_binary: labels must be 0 or 1, got " + std::to_string(y));
    }
    if (n_pos == 0 || n_neg == 0)
        throw ValueError("auc_binary: need at least one positive and one negative label");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Midrank ties, then AUC = (R₊ − n₊(n₊+1)/2) / (n₊·n₋).
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += midrank;
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct MetricResult {
    std::string name;
    double value = 0.0;
    std::map<int, std::size_t> support; // per-class test label counts
};

/// Mean and sample standard deviation (n−1 denominator; 0 when n = 1).
struct RunSummary {
    double mean = 0.0;
    double std_dev = 0.0;
};

inline RunSummary summarize_runs(const std::vector<double>& finals) {
    if (finals.empty()) throw ContractError("summarize_runs: need at least one run");
    RunSummary s;
    for (double v : finals) s.mean += v;
    s.mean /= static_cast<double>(finals.size());
    if (finals.size() > 1) {
        double ss = 0.0;
        for (double v : finals) ss += (v - s.mean) * (v - s.mean);
        s.std_dev = std::sqrt(ss / static_cast<double>(finals.size() - 1));
    }
    return s;
}

} // namespace fedsim
