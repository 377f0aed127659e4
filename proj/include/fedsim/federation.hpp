// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedsim/corruption.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/param_set.hpp"
#include "fedsim/partition.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Strategy configuration
// ---------------------------------------------------------------------------

enum class Strategy { FedAvg, FedProx, Scaffold, FedOpt, FedRS };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::FedAvg: return "fedavg";
        case Strategy::FedProx: return "fedprox";
        case Strategy::Scaffold: return "scaffold";
        case Strategy::FedOpt: return "fedopt";
        case Strategy::FedRS: return "fedrs";
    }
    return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "fedavg") return Strategy::FedAvg;
    if (s == "fedprox") return Strategy::FedProx;
    if (s == "scaffold") return Strategy::Scaffold;
    if (s == "fedopt") return Strategy::FedOpt;
    if (s == "fedrs") return Strategy::FedRS;
    throw ConfigError("unknown strategy '" + s + "'");
}

enum class ServerOptimizer { Momentum, Adam };

inline std::string to_string(ServerOptimizer o) {
    return o == ServerOptimizer::Momentum ? "momentum" : "adam";
}

inline ServerOptimizer server_optimizer_from_string(const std::string& s) {
    if (s == "momentum") return ServerOptimizer::Momentum;
    if (s == "adam") return ServerOptimizer::Adam;
    throw ConfigError("unknown server optimizer '" + s + "' (expected momentum or adam)");
}

struct StrategyConfig {
    Strategy name = Strategy::FedAvg;
    double lr = 0.05;      // client SGD step
    std::size_t local_epochs = 1;
    std::size_t batch_size = 16;
    double mu = 0.01;      // fedprox proximal weight
    double server_lr = 1e-3; // fedopt
    ServerOptimizer server_opt = ServerOptimizer::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double alpha_rs = 0.5; // fedrs absent-class logit scale

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("strategy: lr must be > 0");
        if (mu < 0.0) throw ConfigError("strategy: mu must be >= 0");
        if (!(server_lr > 0.0)) throw ConfigError("strategy: server_lr must be > 0");
        if (!(alpha_rs > 0.0 && alpha_rs <= 1.0))
            throw ConfigError("strategy: alpha_rs must lie in (0,1]");
        if (local_epochs == 0) throw ConfigError("strategy: local_epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("strategy: batch_size must be >= 1");
        if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("strategy: beta1 must lie in [0,1)");
        if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("strategy: beta2 must lie in [0,1)");
    }
};

// ---------------------------------------------------------------------------
// Federated state
// ---------------------------------------------------------------------------

struct ServerState {
    ParamSet global;
    std::size_t round = 0; // completed aggregations
    ParamSet opt_m, opt_v; // fedopt first/second moments
    ParamSet control;      // scaffold global variate c
};

inline ServerState make_server_state(const ParamSet& initial, const StrategyConfig& strategy) {
    ServerState s;
    s.global = initial;
    if (strategy.name == Strategy::FedOpt) {
        s.opt_m = initial.zeros_like();
        s.opt_v = initial.zeros_like();
    }
    if (strategy.name == Strategy::Scaffold) s.control = initial.zeros_like();
    return s;
}

struct ClientState {
    std::string id;
    ParamSet control;                          // scaffold variate c_i, zeros until first use
    std::vector<std::size_t> label_histogram;  // observed labels seen in local training
};

/// What crosses the client -> server boundary: parameter-shaped tensors,
/// counts, and scalars only — never samples.
struct ClientUpdate {
    std::string client_id;
    ParamSet delta;          // w_local − w_global
    std::size_t num_samples = 0;
    ParamSet control_delta;  // scaffold only
    double train_loss = 0.0; // mean over local steps
    bool diverged = false;   // excluded from aggregation, reported
};

// ---------------------------------------------------------------------------
// Client sampling
// ---------------------------------------------------------------------------

/// Clients holding at least one sample that is labeled and has >= 1 available
/// modality under the overlay. Sorted by id.
inline std::vector<std::string> eligible_clients(const ClientPartition& partition,
                                                 const CorruptedView& view) {
    std::vector<std::string> out;
    for (const auto& [cid, indices] : partition.clients)
        for (std::size_t i : indices)
            if (view.trainable(i)) {
                out.push_back(cid);
                break;
            }
    return out;
}

/// ceil(rate * n) distinct ids, uniform without replacement, from the stream
/// derive_stream(seed, kCohort, round). The product is nudged by -1e-9 before
/// the ceiling so decimal rates like 0.1 * 100 select exactly 10.
inline std::vector<std::string> sample_clients(const std::vector<std::string>& eligible,
                                               double rate, std::size_t round,
                                               std::uint64_t seed) {
    if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sample_clients: rate must lie in (0,1]");
    if (eligible.empty()) throw EmptyCohortError("sample_clients: no eligible clients");
    const std::size_t n = eligible.size();
    auto m = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
    m = std::min(std::max<std::size_t>(m, 1), n);
    Rng rng(derive_stream(seed, streams::kCohort, round));
    std::vector<std::string> cohort;
    cohort.reserve(m);
    for (std::size_t idx : rng.sample_without_replacement(n, m)) cohort.push_back(eligible[idx]);
    return cohort; // ascending positions over a sorted list: already sorted
}

inline std::vector<std::string> sample_clients(const ClientPartition& partition,
                                               const CorruptedView& view, double rate,
                                               std::size_t round, std::uint64_t seed) {
    return sample_clients(eligible_clients(partition, view), rate, round, seed);
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

/// One client's local pass. Stream consumption order on `rng` (one private
/// stream per (round, client)): first the Fisher–Yates shuffle of the
/// trainable items, then the model's dropout masks batch by batch. The same
/// shuffled order is reused across local epochs.
///
/// Per minibatch gradient g: fedprox adds mu*(w − w_global), skipped exactly
/// when mu == 0; scaffold adds (c − c_i); fedrs scales absent-class logits by
/// alpha_rs inside the forward. Afterwards scaffold refreshes
/// c_i ← c_i − c + (w_global − w_local)/(K·lr), K = local step count, and
/// ships the difference. A non-finite loss or gradient surfaces as
/// ClientDivergenceError naming the client.
inline ClientUpdate local_train(const MultimodalClassifier& architecture,
                                const ParamSet& w_global, const ParamSet& server_control,
                                const std::string& client_id,
                                const std::vector<std::size_t>& cell, const CorruptedView& view,
                                const StrategyConfig& strategy, ClientState& state, Rng rng) {
    const Dataset& dataset = view.dataset();
    std::vector<std::size_t> usable;
    for (std::size_t i : cell)
        if (view.trainable(i)) usable.push_back(i);
    if (usable.empty())
        throw ContractError("local_train: client '" + client_id + "' has no trainable samples");
    rng.shuffle(usable);

    const std::size_t C = dataset.manifest().num_classes;
    state.id = client_id;
    state.label_histogram.assign(C, 0);
    for (std::size_t i : usable)
        state.label_histogram[static_cast<std::size_t>(*view.observed_label(i))]++;
    std::vector<double> scale; // fedrs restricted softmax
    if (strategy.name == Strategy::FedRS) {
        scale.resize(C);
        for (std::size_t c = 0; c < C; ++c)
            scale[c] = state.label_histogram[c] > 0 ? 1.0 : strategy.alpha_rs;
    }

    const bool scaffold = strategy.name == Strategy::Scaffold;
    if (scaffold && state.control.size() == 0) state.control = w_global.zeros_like();

    MultimodalClassifier model = architecture;
    model.params() = w_global;

    ClientUpdate update;
    update.client_id = client_id;
    update.num_samples = usable.size();
    std::size_t steps = 0;
    double loss_sum = 0.0;
    try {
        for (std::size_t epoch = 0; epoch < strategy.local_epochs; ++epoch) {
            for (std::size_t begin = 0; begin < usable.size(); begin += strategy.batch_size) {
                const std::size_t end = std::min(begin + strategy.batch_size, usable.size());
                Batch batch;
                batch.reserve(end - begin);
                for (std::size_t k = begin; k < end; ++k) {
                    const std::size_t i = usable[k];
                    batch.push_back(
                        BatchItem{&dataset[i], view.availability(i), view.observed_label(i)});
                }
                ForwardOptions opts;
                opts.mode = Mode::Train;
                opts.dropout_rng = &rng;
                if (!scale.empty()) opts.logit_scale = &scale;
                ModelTape tape;
                const ForwardResult fwd = model.forward_loss(batch, opts, &tape);
                if (!std::isfinite(fwd.loss)) throw NumericError("non-finite training loss");
                GradSet grads = model.backward(tape);
                if (strategy.name == Strategy::FedProx && strategy.mu != 0.0)
                    for (std::size_t p = 0; p < grads.size(); ++p) {
                        Tensor prox = model.params().tensor(p);
                        prox -= w_global.tensor(p);
                        grads.tensor(p).add_scaled(prox, strategy.mu);
                    }
                if (scaffold) {
                    grads += server_control;
                    grads -= state.control;
                }
                sgd_step_inplace(model.params(), grads, strategy.lr);
                loss_sum += fwd.loss;
                ++steps;
            }
        }
    } catch (const NumericError& e) {
        throw ClientDivergenceError("client '" + client_id + "' diverged: " + e.what());
    }

    update.train_loss = loss_sum / static_cast<double>(steps);
    update.delta = model.params();
    update.delta -= w_global;
    if (scaffold) {
        ParamSet c_new = state.control;
        c_new -= server_control;
        c_new.add_scaled(update.delta, -1.0 / (static_cast<double>(steps) * strategy.lr));
        update.control_delta = c_new;
        update.control_delta -= state.control;
        state.control = std::move(c_new);
    }
    return update;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Weighted average in ascending client-id order, anchored on the first
/// update so that identical deltas (and a single update) average exactly:
/// mean = d_0 + sum_i n_i (d_i − d_0) / sum_i n_i.
inline ParamSet weighted_mean_delta(std::vector<const ClientUpdate*>& sorted) {
    double total = 0.0;
    for (const ClientUpdate* u : sorted) {
        if (u->num_samples == 0) throw ContractError("aggregate: update with zero samples");
        total += static_cast<double>(u->num_samples);
    }
    const ParamSet& anchor = sorted.front()->delta;
    ParamSet acc = anchor.zeros_like();
    for (const ClientUpdate* u : sorted) {
        ParamSet diff = u->delta;
        diff -= anchor;
        acc.add_scaled(diff, static_cast<double>(u->num_samples));
    }
    acc *= 1.0 / total;
    acc += anchor;
    return acc;
}

/// Applies one round of updates to the server. fedavg/fedprox/fedrs/scaffold
/// move the global model by the weighted mean delta; fedopt feeds −mean into
/// the configured server optimizer; scaffold additionally advances the global
/// variate by (|S|/num_clients) · mean(control deltas).
inline void aggregate(const std::vector<ClientUpdate>& updates, const StrategyConfig& strategy,
                      ServerState& server, std::size_t num_clients) {
    std::vector<const ClientUpdate*> sorted;
    for (const ClientUpdate& u : updates)
        if (!u.diverged) sorted.push_back(&u);
    if (sorted.empty()) throw EmptyCohortError("aggregate: no usable client updates");
    std::sort(sorted.begin(), sorted.end(), [](const ClientUpdate* a, const ClientUpdate* b) {
        return a->client_id < b->client_id;
    });
    server.global.require_congruent(sorted.front()->delta, "aggregate");

    const ParamSet mean = weighted_mean_delta(sorted);
    if (strategy.name == Strategy::FedOpt) {
        const std::size_t t = server.round + 1;
        if (strategy.server_opt == ServerOptimizer::Momentum) {
            // m ← beta1·m + g, w ← w − lr·m with pseudo-gradient g = −mean
            for (std::size_t p = 0; p < mean.size(); ++p) {
                Tensor& m = server.opt_m.tensor(p);
                m *= strategy.beta1;
                m.add_scaled(mean.tensor(p), -1.0);
                server.global.tensor(p).add_scaled(m, -strategy.server_lr);
            }
        } else {
            const double bc1 = 1.0 - std::pow(strategy.beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(strategy.beta2, static_cast<double>(t));
            for (std::size_t p = 0; p < mean.size(); ++p) {
                Tensor& m = server.opt_m.tensor(p);
                Tensor& v = server.opt_v.tensor(p);
                const Tensor& g = mean.tensor(p);
                Tensor& w = server.global.tensor(p);
                for (std::size_t j = 0; j < g.size(); ++j) {
                    const double gj = -g[j];
                    m[j] = strategy.beta1 * m[j] + (1.0 - strategy.beta1) * gj;
                    v[j] = strategy.beta2 * v[j] + (1.0 - strategy.beta2) * gj * gj;
                    const double m_hat = m[j] / bc1;
                    const double v_hat = v[j] / bc2;
                    w[j] -= strategy.server_lr * m_hat / (std::sqrt(v_hat) + strategy.adam_eps);
                }
            }
        }
    } else {
        server.global += mean;
    }

    if (strategy.name == Strategy::Scaffold) {
        ParamSet c_mean = sorted.front()->control_delta.zeros_like();
        for (const ClientUpdate* u : sorted) c_mean += u->control_delta;
        c_mean *= 1.0 / static_cast<double>(sorted.size());
        server.control.add_scaled(c_mean,
                                  static_cast<double>(sorted.size()) /
                                      static_cast<double>(num_clients));
    }
    server.round += 1;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::string metric_key(MetricKind m) {
    switch (m) {
        case MetricKind::UAR: return "uar";
        case MetricKind::ACC: return "acc";
        case MetricKind::F1: return "f1";
        case MetricKind::AUC: return "auc";
    }
    return "?";
}

struct EvalResult {
    std::map<std::string, double> metrics;  // acc/uar/f1 always; auc when binary
    std::map<int, std::size_t> support;     // labels seen
};

/// Deterministic eval-mode pass over the given samples of the base dataset
/// (never the corrupted view: evaluation integrity).
inline EvalResult evaluate_model(const MultimodalClassifier& model, const Dataset& dataset,
                                 const std::vector<std::size_t>& indices) {
    EvalResult result;
    if (indices.empty()) return result;
    Batch batch;
    std::vector<int> labels;
    batch.reserve(indices.size());
    for (std::size_t i : indices) {
        if (!dataset[i].label)
            throw ContractError("evaluate_model: sample '" + dataset[i].id + "' is unlabeled");
        batch.push_back(uncorrupted_item(dataset[i]));
        labels.push_back(*dataset[i].label);
        result.support[*dataset[i].label]++;
    }
    const Tensor logits = model.logits(batch);
    const std::vector<int> predictions = MultimodalClassifier::predict(logits);
    result.metrics["acc"] = top1_accuracy(predictions, labels);
    result.metrics["uar"] = uar(predictions, labels);
    result.metrics["f1"] = macro_f1(predictions, labels);
    if (model.num_classes() == 2 && result.support.size() == 2) {
        std::vector<double> scores(labels.size());
        for (std::size_t b = 0; b < labels.size(); ++b) {
            // P(class 1) via the stable two-logit softmax
            const double z0 = logits.at(b, 0), z1 = logits.at(b, 1);
            const double m = std::max(z0, z1);
            const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
            scores[b] = e1 / (e0 + e1);
        }
        result.metrics["auc"] = auc_binary(scores, labels);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Round orchestration
// ---------------------------------------------------------------------------

/// Worker-count resolution: an explicit request wins; otherwise the
/// FEDSIM_WORKERS environment variable; otherwise 1.
inline std::size_t resolve_worker_count(std::size_t requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("FEDSIM_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1)
            throw ConfigError("FEDSIM_WORKERS must be a positive integer, got '" +
                              std::string(env) + "'");
        return static_cast<std::size_t>(v);
    }
    return 1;
}

struct RoundConfig {
    double sample_rate = 0.1;
    std::uint64_t master_seed = 0;
    std::size_t workers = 0; // 0 = resolve from environment
};

struct RoundReport {
    std::size_t round = 0; // 1-based
    std::vector<std::string> cohort;
    std::vector<std::string> diverged;
    double mean_train_loss = 0.0; // unweighted mean over surviving clients
    std::map<std::string, double> test_metrics;
};

/// One federated round: sample a cohort, train the sampled clients against
/// the immutable global snapshot (possibly across worker threads — each
/// client has a private RNG stream keyed by (round, client id), so serial and
/// parallel execution are bitwise identical), aggregate in ascending id
/// order, then evaluate on the untouched test split.
inline RoundReport run_round(MultimodalClassifier& model, ServerState& server,
                             std::map<std::string, ClientState>& client_states,
                             const ClientPartition& partition, const CorruptedView& view,
                             const StrategyConfig& strategy, const RoundConfig& rc) {
    strategy.validate();
    const std::size_t r = server.round; // 0-based stream index for this round
    RoundReport report;
    report.cohort = sample_clients(partition, view, rc.sample_rate, r, rc.master_seed);

    const ParamSet& snapshot = server.global;
    std::vector<ClientUpdate> updates(report.cohort.size());
    std::vector<std::exception_ptr> failures(report.cohort.size());
    for (const std::string& cid : report.cohort) client_states[cid].id = cid;

    auto train_one = [&](std::size_t pos) {
        const std::string& cid = report.cohort[pos];
        Rng rng(derive_stream(rc.master_seed, streams::kClient, r, fnv1a(cid)));
        try {
            updates[pos] = local_train(model, snapshot, server.control, cid,
                                       partition.clients.at(cid), view, strategy,
                                       client_states.at(cid), std::move(rng));
        } catch (const ClientDivergenceError&) {
            updates[pos].client_id = cid;
            updates[pos].diverged = true;
        } catch (...) {
            failures[pos] = std::current_exception();
        }
    };

    const std::size_t workers =
        std::min(resolve_worker_count(rc.workers), report.cohort.size());
    if (workers <= 1) {
        for (std::size_t pos = 0; pos < report.cohort.size(); ++pos) train_one(pos);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t pos = next.fetch_add(1);
                    if (pos >= report.cohort.size()) return;
                    train_one(pos);
                }
            });
        for (std::thread& th : pool) th.join();
    }
    for (std::size_t pos = 0; pos < failures.size(); ++pos)
        if (failures[pos]) std::rethrow_exception(failures[pos]);

    std::size_t survivors = 0;
    for (const ClientUpdate& u : updates) {
        if (u.diverged) {
            report.diverged.push_back(u.client_id);
        } else {
            report.mean_train_loss += u.train_loss;
            ++survivors;
        }
    }
    if (survivors == 0) throw EmptyCohortError("run_round: every sampled client diverged");
    report.mean_train_loss /= static_cast<double>(survivors);

    aggregate(updates, strategy, server, partition.num_clients());
    model.params() = server.global;
    report.round = server.round;
    report.test_metrics =
        evaluate_model(model, view.dataset(), view.dataset().test_indices()).metrics;
    return report;
}

} // namespace fedsim
