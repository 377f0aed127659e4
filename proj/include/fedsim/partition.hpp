// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

enum class PartitionKind { Natural, Dirichlet };

struct PartitionProvenance {
    PartitionKind kind = PartitionKind::Natural;
    double alpha = 0.0;        // dirichlet only
    std::uint64_t seed = 0;    // dirichlet only
};

/// Assignment of train-split sample indices to clients. Cells are disjoint,
/// sorted ascending, and jointly cover the train split exactly.
struct ClientPartition {
    std::map<std::string, std::vector<std::size_t>> clients;
    PartitionProvenance provenance;

    std::size_t num_clients() const { return clients.size(); }

    std::vector<std::string> client_ids() const {
        std::vector<std::string> ids;
        ids.reserve(clients.size());
        for (const auto& [cid, _] : clients) ids.push_back(cid);
        return ids;
    }
};

inline ClientPartition partition_natural(const Dataset& dataset) {
    ClientPartition part;
    part.provenance.kind = PartitionKind::Natural;
    for (std::size_t i : dataset.train_indices()) {
        const Sample& s = dataset[i];
        if (s.client_id.empty())
            throw ValueError("partition_natural: train sample '" + s.id + "' has no client id");
        part.clients[s.client_id].push_back(i); // train_indices() is ascending
    }
    return part;
}

inline constexpr std::size_t kMinClientSamples = 2;
inline constexpr std::size_t kMaxPartitionRetries = 100;

/// Label-skew partition. Randomness consumption order (fixed so the draw can
/// be replicated externally): attempts run back to back on one stream seeded
/// with derive_stream(seed, streams::kDirichlet); within an attempt, classes
/// ascend; per class, num_clients gamma(alpha) draws in client order make the
/// Dirichlet weights, then each class sample (ascending dataset index) spends
/// one uniform() placed by cumulative-probability walk. An attempt is
/// accepted once every client holds at least kMinClientSamples samples.
inline ClientPartition partition_dirichlet(const Dataset& dataset, double alpha,
                                           std::size_t num_clients, std::uint64_t seed) {
    if (!(alpha > 0.0)) throw ValueError("partition_dirichlet: alpha must be > 0");
    if (num_clients < 1) throw ValueError("partition_dirichlet: num_clients must be >= 1");

    std::map<int, std::vector<std::size_t>> by_class; // ascending class, ascending index
    std::size_t total = 0;
    for (std::size_t i : dataset.train_indices()) {
        const Sample& s = dataset[i];
        if (!s.label)
            throw ContractError("partition_dirichlet: train sample '" + s.id + "' is unlabeled");
        by_class[*s.label].push_back(i);
        ++total;
    }

    Rng rng(derive_stream(seed, streams::kDirichlet));
    for (std::size_t attempt = 0; attempt < kMaxPartitionRetries; ++attempt) {
        std::vector<std::vector<std::size_t>> cells(num_clients);
        for (const auto& [cls, indices] : by_class) {
            std::vector<double> g(num_clients);
            double g_sum = 0.0;
            for (std::size_t j = 0; j < num_clients; ++j) {
                g[j] = rng.gamma(alpha);
                g_sum += g[j];
            }
            std::vector<double> cum(num_clients);
            double acc = 0.0;
            for (std::size_t j = 0; j < num_clients; ++j) {
                acc += g[j] / g_sum;
                cum[j] = acc;
            }
            cum.back() = 1.0; // guard the walk against rounding shortfall
            for (std::size_t idx : indices) {
                const double u = rng.uniform();
                std::size_t j = 0;
                while (j + 1 < num_clients && u >= cum[j]) ++j;
                cells[j].push_back(idx);
            }
        }
        bool ok = true;
        for (const auto& cell : cells)
            if (cell.size() < kMinClientSamples) { ok = false; break; }
        if (!ok) continue;

        ClientPartition part;
        part.provenance = {PartitionKind::Dirichlet, alpha, seed};
        char buf[32];
        for (std::size_t j = 0; j < num_clients; ++j) {
            std::snprintf(buf, sizeof buf, "c%04zu", j);
            part.clients[buf] = std::move(cells[j]); // per-class appends keep ascending order
        }
        return part;
    }
    throw InfeasiblePartitionError(
        "partition_dirichlet: no draw met min " + std::to_string(kMinClientSamples) +
        " samples/client after " + std::to_string(kMaxPartitionRetries) + " attempts (alpha=" +
        std::to_string(alpha) + ", clients=" + std::to_string(num_clients) +
        ", train samples=" + std::to_string(total) + ")");
}

// ---------------------------------------------------------------------------
// Heterogeneity diagnostics
// ---------------------------------------------------------------------------

struct HeterogeneityReport {
    std::map<std::string, std::size_t> client_sizes;
    std::map<std::string, double> client_entropy; // nats
    double mean_entropy = 0.0;
    double mean_pairwise_tv = 0.0; // mean over unordered client pairs
};

inline HeterogeneityReport heterogeneity_report(const ClientPartition& partition,
                                                const Dataset& dataset) {
    const std::size_t C = dataset.manifest().num_classes;
    std::vector<std::vector<double>> dists; // label distribution per client, id order
    HeterogeneityReport rep;
    for (const auto& [cid, indices] : partition.clients) {
        std::vector<double> p(C, 0.0);
        std::size_t labeled = 0;
        for (std::size_t i : indices) {
            if (!dataset[i].label)
                throw ContractError("heterogeneity_report: sample '" + dataset[i].id + "' is unlabeled");
            p[static_cast<std::size_t>(*dataset[i].label)] += 1.0;
            ++labeled;
        }
        rep.client_sizes[cid] = indices.size();
        double h = 0.0;
        for (double& v : p) {
            v /= static_cast<double>(labeled);
            if (v > 0.0) h -= v * std::log(v);
        }
        rep.client_entropy[cid] = h;
        rep.mean_entropy += h;
        dists.push_back(std::move(p));
    }
    if (!dists.empty()) rep.mean_entropy /= static_cast<double>(dists.size());

    if (dists.size() >= 2) {
        double tv_sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < dists.size(); ++a) {
            for (std::size_t b = a + 1; b < dists.size(); ++b) {
                double tv = 0.0;
                for (std::size_t c = 0; c < C; ++c) tv += std::abs(dists[a][c] - dists[b][c]);
                tv_sum += 0.5 * tv;
                ++pairs;
            }
        }
        rep.mean_pairwise_tv = tv_sum / static_cast<double>(pairs);
    }
    return rep;
}

} // namespace fedsim
