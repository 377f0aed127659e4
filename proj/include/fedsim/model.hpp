// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/layers.hpp"
#include "fedsim/param_set.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class EncoderKind { ConvRnn, RnnOnly };

struct EncoderConfig {
    std::vector<std::size_t> conv_filters = {16, 32, 64}; // conv_rnn front end
    std::size_t kernel = 5;                               // odd, along time
    std::size_t stride = 1;
    std::size_t hidden = 128;                             // GRU width H
    double dropout = 0.2; // applied after encoder output and after the first classifier layer

    void validate() const {
        if (hidden == 0) throw ConfigError("encoder: hidden width must be positive");
        if (kernel == 0 || kernel % 2 == 0) throw ConfigError("encoder: kernel must be odd");
        if (stride == 0) throw ConfigError("encoder: stride must be positive");
        for (std::size_t f : conv_filters)
            if (f == 0) throw ConfigError("encoder: conv filter counts must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must lie in [0,1)");
    }
};

enum class FusionScheme { Concat, Attention };

inline std::string to_string(FusionScheme s) {
    return s == FusionScheme::Concat ? "concat" : "attention";
}

inline FusionScheme fusion_from_string(const std::string& s) {
    if (s == "concat") return FusionScheme::Concat;
    if (s == "attention") return FusionScheme::Attention;
    throw ConfigError("unknown fusion scheme '" + s + "' (expected concat or attention)");
}

struct FusionConfig {
    FusionScheme scheme = FusionScheme::Concat;
    std::size_t heads = 6; // attention only; head dim equals the encoder width

    void validate() const {
        if (heads < 1) throw ConfigError("fusion: heads must be >= 1");
    }
};

struct ModelConfig {
    EncoderConfig encoder;
    FusionConfig fusion;
    std::size_t classifier_hidden = 64;

    void validate() const {
        encoder.validate();
        fusion.validate();
        if (classifier_hidden == 0) throw ConfigError("model: classifier_hidden must be positive");
    }
};

inline EncoderKind encoder_kind_for(ModalityKind kind) {
    return kind == ModalityKind::Signal ? EncoderKind::ConvRnn : EncoderKind::RnnOnly;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// One sample as the trainer sees it: the immutable sample plus whatever a
/// corruption overlay says about availability and the observed label.
struct BatchItem {
    const Sample* sample = nullptr;
    std::vector<bool> available; // manifest order
    std::optional<int> label;    // observed label
};

using Batch = std::vector<BatchItem>;

inline BatchItem uncorrupted_item(const Sample& s) {
    return BatchItem{&s, s.available, s.label};
}

// ---------------------------------------------------------------------------
// Fusion primitives (public so tests can drive them standalone)
// ---------------------------------------------------------------------------

/// Temporal mean per modality over valid rows (zero vector when fully
/// masked), concatenated in the given order. reps[m] is [T_m, H].
inline Tensor fuse_concat(const std::vector<Tensor>& reps,
                          const std::vector<std::vector<bool>>& masks) {
    if (reps.empty()) throw ContractError("fuse_concat: need at least one modality");
    if (masks.size() != reps.size())
        throw DimensionError("fuse_concat: got " + std::to_string(reps.size()) + " reps but " +
                             std::to_string(masks.size()) + " masks");
    const std::size_t h = reps[0].extent(1);
    Tensor out({reps.size() * h});
    for (std::size_t m = 0; m < reps.size(); ++m) {
        const Tensor& rep = reps[m];
        if (rep.rank() != 2 || rep.extent(1) != h)
            throw DimensionError("fuse_concat: modality " + std::to_string(m) + " has shape " +
                                 rep.shape_string() + ", expected [T, " + std::to_string(h) + "]");
        if (masks[m].size() != rep.extent(0))
            throw DimensionError("fuse_concat: mask length mismatch for modality " +
                                 std::to_string(m));
        std::size_t valid = 0;
        for (std::size_t t = 0; t < rep.extent(0); ++t) {
            if (!masks[m][t]) continue;
            ++valid;
            for (std::size_t j = 0; j < h; ++j) out[m * h + j] += rep.at(t, j);
        }
        if (valid > 0)
            for (std::size_t j = 0; j < h; ++j) out[m * h + j] /= static_cast<double>(valid);
    }
    return out;
}

/// Attention bookkeeping for one sample, kept for the backward pass.
struct AttnTape {
    Tensor rows;                          // [R, H] stacked modality outputs
    std::vector<bool> row_mask;           // validity per row
    std::vector<std::size_t> row_offsets; // first row of each modality
    Tensor u;                             // [R, H]; masked rows left zero
    Tensor a;                             // [heads, R]; masked rows exactly 0
};

/// Hierarchical attention: per row u_i = tanh(W h_i + b); per head k the row
/// logit is u_i . c_k with masked rows pinned to -1e30 (softmax weight
/// exactly 0 after max subtraction); v_k = sum_i a_i h_i; head outputs
/// concatenate. Masked rows are never read, so the result is bitwise
/// invariant to their values.
inline Tensor fuse_attention(const std::vector<Tensor>& reps,
                             const std::vector<std::vector<bool>>& masks, const Tensor& w,
                             const Tensor& b, const std::vector<Tensor>& context,
                             AttnTape* tape = nullptr) {
    if (reps.empty()) throw ContractError("fuse_attention: need at least one modality");
    if (masks.size() != reps.size())
        throw DimensionError("fuse_attention: reps/masks count mismatch");
    if (context.empty()) throw ContractError("fuse_attention: need at least one head");
    if (w.rank() != 2 || w.extent(0) != w.extent(1))
        throw DimensionError("fuse_attention: W must be square [H, H], got " + w.shape_string());
    const std::size_t h = w.extent(1);
    if (b.rank() != 1 || b.extent(0) != h)
        throw DimensionError("fuse_attention: b has shape " + b.shape_string());

    std::size_t total_rows = 0;
    for (std::size_t m = 0; m < reps.size(); ++m) {
        if (reps[m].rank() != 2 || reps[m].extent(1) != h)
            throw DimensionError("fuse_attention: modality " + std::to_string(m) + " has shape " +
                                 reps[m].shape_string() + ", expected [T, " + std::to_string(h) +
                                 "]");
        if (masks[m].size() != reps[m].extent(0))
            throw DimensionError("fuse_attention: mask length mismatch for modality " +
                                 std::to_string(m));
        total_rows += reps[m].extent(0);
    }

    AttnTape local;
    AttnTape& t = tape ? *tape : local;
    t.rows = Tensor({total_rows, h});
    t.row_mask.assign(total_rows, false);
    t.row_offsets.clear();
    std::size_t r = 0;
    for (std::size_t m = 0; m < reps.size(); ++m) {
        t.row_offsets.push_back(r);
        for (std::size_t i = 0; i < reps[m].extent(0); ++i, ++r) {
            t.row_mask[r] = masks[m][i];
            if (!masks[m][i]) continue; // masked row values stay unread
            for (std::size_t j = 0; j < h; ++j) t.rows.at(r, j) = reps[m].at(i, j);
        }
    }

    std::size_t n_valid = 0;
    for (bool v : t.row_mask) n_valid += v ? 1 : 0;
    if (n_valid == 0) throw DegenerateAttentionError("fuse_attention: every row is masked");

    // u = tanh(W h + b), valid rows only.
    t.u = Tensor({total_rows, h});
    for (std::size_t i = 0; i < total_rows; ++i) {
        if (!t.row_mask[i]) continue;
        for (std::size_t o = 0; o < h; ++o) {
            double acc = b[o];
            for (std::size_t j = 0; j < h; ++j) acc += w.at(o, j) * t.rows.at(i, j);
            t.u.at(i, o) = std::tanh(acc);
        }
    }

    const std::size_t heads = context.size();
    t.a = Tensor({heads, total_rows});
    Tensor out({heads * h});
    std::vector<double> logits(total_rows);
    for (std::size_t k = 0; k < heads; ++k) {
        const Tensor& c = context[k];
        if (c.rank() != 1 || c.extent(0) != h)
            throw DimensionError("fuse_attention: context vector " + std::to_string(k) +
                                 " has shape " + c.shape_string());
        double max_logit = -1e30;
        for (std::size_t i = 0; i < total_rows; ++i) {
            if (!t.row_mask[i]) {
                logits[i] = -1e30;
                continue;
            }
            double acc = 0.0;
            for (std::size_t j = 0; j < h; ++j) acc += t.u.at(i, j) * c[j];
            logits[i] = acc;
            max_logit = std::max(max_logit, acc);
        }
        double denom = 0.0;
        for (std::size_t i = 0; i < total_rows; ++i) {
            if (!t.row_mask[i]) continue; // weight is exactly 0
            denom += std::exp(logits[i] - max_logit);
        }
        for (std::size_t i = 0; i < total_rows; ++i) {
            if (!t.row_mask[i]) continue;
            const double a_i = std::exp(logits[i] - max_logit) / denom;
            t.a.at(k, i) = a_i;
            for (std::size_t j = 0; j < h; ++j) out[k * h + j] += a_i * t.rows.at(i, j);
        }
    }
    return out;
}

/// Accumulates one attention head's gradients. d_out points at the head's
/// [H] slice of the fused-output gradient; d_rows/dw/db/dc grow in place.
/// Masked rows have weight exactly 0 and contribute nothing.
inline void fuse_attention_backward_head(const AttnTape& t, const Tensor& w, const Tensor& c,
                                         std::size_t head, const double* d_out, Tensor& d_rows,
                                         Tensor& dw, Tensor& db, Tensor& dc) {
    const std::size_t rows = t.rows.extent(0);
    const std::size_t h = t.rows.extent(1);
    std::vector<double> da(rows, 0.0);
    double s = 0.0; // sum_i a_i da_i, softmax Jacobian contraction
    for (std::size_t i = 0; i < rows; ++i) {
        if (!t.row_mask[i]) continue;
        double acc = 0.0;
        for (std::size_t j = 0; j < h; ++j) acc += d_out[j] * t.rows.at(i, j);
        da[i] = acc;
        s += t.a.at(head, i) * acc;
    }
    for (std::size_t i = 0; i < rows; ++i) {
        if (!t.row_mask[i]) continue;
        const double a_i = t.a.at(head, i);
        const double dlogit = a_i * (da[i] - s);
        for (std::size_t j = 0; j < h; ++j) d_rows.at(i, j) += a_i * d_out[j]; // v-path
        for (std::size_t o = 0; o < h; ++o) {
            dc[o] += dlogit * t.u.at(i, o);            // logit = u . c
            const double du = dlogit * c[o];
            const double dpre = du * (1.0 - t.u.at(i, o) * t.u.at(i, o)); // tanh'
            db[o] += dpre;
            for (std::size_t j = 0; j < h; ++j) {
                dw.at(o, j) += dpre * t.rows.at(i, j);
                d_rows.at(i, j) += dpre * w.at(o, j); // W^T back into the row
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The multimodal classifier
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

struct ForwardOptions {
    Mode mode = Mode::Eval;
    Rng* dropout_rng = nullptr;                       // required when training with dropout > 0
    const std::vector<double>* logit_scale = nullptr; // per-class multiplier before softmax
};

/// Per-(sample, active-modality) encoder bookkeeping for the backward pass.
struct EncodeTape {
    bool available = false;
    std::vector<Tensor> conv_in;  // input to each conv layer (conv_rnn only)
    std::vector<Tensor> conv_pre; // pre-ReLU conv outputs
    GruTape gru;
    Tensor rep;          // encoder output after dropout, [T', H]; zeros [1, H] when unavailable
    Tensor dropout_mask; // empty when dropout was not applied
};

struct ModelTape {
    std::vector<std::vector<EncodeTape>> enc; // [batch][active-modality position]
    std::vector<AttnTape> attn;               // per sample (attention fusion only)
    Tensor fused;                             // [B, F]
    Tensor fc1_pre, fc1_post;                 // [B, hidden]
    Tensor cls_dropout_mask;                  // empty when not applied
    Tensor fc1_dropped;                       // input to the output layer
    Tensor probs;                             // [B, C]
    std::vector<int> labels;
    std::vector<double> logit_scale; // empty when none
    Mode mode = Mode::Eval;
};

struct ForwardResult {
    double loss = 0.0;
    Tensor logits; // [B, C], after logit scaling when configured
};

/// Per-modality encoders -> fusion -> two dense layers -> softmax. Parameter
/// names, shapes, and ordering are a pure function of (manifest, config,
/// active modalities), so every client materializes a congruent ParamSet.
///
/// Randomness is consumed only in train mode with dropout > 0, in a fixed
/// order: per batch item, per available active modality (encoder output
/// mask), then one classifier mask — so a shared Rng stream replays exactly.
class MultimodalClassifier {
public:
    MultimodalClassifier(const DatasetManifest& manifest, const ModelConfig& config,
                         std::uint64_t seed)
        : MultimodalClassifier(manifest, config, all_indices(manifest), config.fusion.scheme,
                               seed) {}

    /// Same architecture restricted to one modality; fusion degenerates to
    /// temporal mean pooling.
    static MultimodalClassifier build_unimodal(const DatasetManifest& manifest,
                                               const ModelConfig& config,
                                               const std::string& modality, std::uint64_t seed) {
        std::size_t idx = manifest.modalities.size();
        for (std::size_t m = 0; m < manifest.modalities.size(); ++m)
            if (manifest.modalities[m].name == modality) idx = m;
        if (idx == manifest.modalities.size())
            throw ConfigError("build_unimodal: modality '" + modality + "' is not in the manifest");
        return MultimodalClassifier(manifest, config, {idx}, FusionScheme::Concat, seed);
    }

    const DatasetManifest& manifest() const { return manifest_; }
    const ModelConfig& config() const { return config_; }
    FusionScheme scheme() const { return scheme_; }
    const std::vector<std::size_t>& active_modalities() const { return active_; }
    std::size_t num_classes() const { return manifest_.num_classes; }

    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    std::size_t fused_dim() const {
        const std::size_t h = config_.encoder.hidden;
        return scheme_ == FusionScheme::Attention ? config_.fusion.heads * h : active_.size() * h;
    }

    /// Training-path forward: labels required; fills `tape` when given.
    ForwardResult forward_loss(const Batch& batch, const ForwardOptions& opts,
                               ModelTape* tape = nullptr) const {
        ModelTape local;
        ModelTape& t = tape ? *tape : local;
        const Tensor logits = forward_core(batch, opts, t);
        t.labels.clear();
        t.labels.reserve(batch.size());
        for (const BatchItem& item : batch) {
            if (!item.label)
                throw ContractError("forward_loss: sample '" + item.sample->id +
                                    "' has no label in a loss batch");
            t.labels.push_back(*item.label);
        }
        const SoftmaxResult sm = softmax_cross_entropy(logits, t.labels);
        t.probs = sm.probs;
        return ForwardResult{sm.loss, logits};
    }

    /// Deterministic evaluation logits; labels not consulted.
    Tensor logits(const Batch& batch) const {
        ModelTape scratch;
        return forward_core(batch, ForwardOptions{}, scratch);
    }

    /// Argmax per row; ties break to the lowest class index.
    static std::vector<int> predict(const Tensor& logits) {
        std::vector<int> out(logits.extent(0));
        for (std::size_t b = 0; b < logits.extent(0); ++b) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.extent(1); ++c)
                if (logits.at(b, c) > logits.at(b, best)) best = c;
            out[b] = static_cast<int>(best);
        }
        return out;
    }

    /// Gradient of the mean batch loss captured by `tape`.
    GradSet backward(const ModelTape& t) const {
        GradSet grads = params_.zeros_like();
        Tensor dlogits = softmax_cross_entropy_backward(t.probs, t.labels);
        if (!t.logit_scale.empty())
            for (std::size_t b = 0; b < dlogits.extent(0); ++b)
                for (std::size_t c = 0; c < dlogits.extent(1); ++c)
                    dlogits.at(b, c) *= t.logit_scale[c];

        // Classifier head.
        Tensor d_fused; // [B, F]
        {
            DenseGrads g2 = dense_backward(t.fc1_dropped, params_.at("cls.fc2.w"), dlogits);
            grads.at("cls.fc2.w") += g2.dw;
            grads.at("cls.fc2.b") += g2.db;
            Tensor d_post = t.cls_dropout_mask.size() > 0
                                ? dropout_backward(g2.dx, t.cls_dropout_mask, config_.encoder.dropout)
                                : std::move(g2.dx);
            Tensor d_pre = relu_backward(t.fc1_pre, d_post);
            DenseGrads g1 = dense_backward(t.fused, params_.at("cls.fc1.w"), d_pre);
            grads.at("cls.fc1.w") += g1.dw;
            grads.at("cls.fc1.b") += g1.db;
            d_fused = std::move(g1.dx);
        }

        const std::size_t h = config_.encoder.hidden;
        for (std::size_t b = 0; b < t.enc.size(); ++b) {
            std::vector<Tensor> drep(active_.size());
            if (scheme_ == FusionScheme::Attention) {
                const AttnTape& at = t.attn[b];
                Tensor d_rows(at.rows.shape());
                for (std::size_t k = 0; k < config_.fusion.heads; ++k)
                    fuse_attention_backward_head(
                        at, params_.at("fusion.w"), params_.at("fusion.c" + std::to_string(k)), k,
                        &d_fused.at(b, k * h), d_rows, grads.at("fusion.w"),
                        grads.at("fusion.b"), grads.at("fusion.c" + std::to_string(k)));
                for (std::size_t m = 0; m < active_.size(); ++m) {
                    if (!t.enc[b][m].available) continue;
                    const std::size_t rows = t.enc[b][m].rep.extent(0);
                    Tensor d({rows, h});
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < h; ++j)
                            d.at(i, j) = d_rows.at(at.row_offsets[m] + i, j);
                    drep[m] = std::move(d);
                }
            } else {
                for (std::size_t m = 0; m < active_.size(); ++m) {
                    if (!t.enc[b][m].available) continue;
                    const std::size_t rows = t.enc[b][m].rep.extent(0);
                    Tensor d({rows, h});
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < h; ++j)
                            d.at(i, j) = d_fused.at(b, m * h + j) / static_cast<double>(rows);
                    drep[m] = std::move(d);
                }
            }
            for (std::size_t m = 0; m < active_.size(); ++m) {
                if (!t.enc[b][m].available) continue;
                encode_backward(t.enc[b][m], drep[m], active_[m], grads);
            }
        }
        return grads;
    }

private:
    static std::vector<std::size_t> all_indices(const DatasetManifest& manifest) {
        std::vector<std::size_t> idx(manifest.modalities.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return idx;
    }

    MultimodalClassifier(const DatasetManifest& manifest, const ModelConfig& config,
                         std::vector<std::size_t> active, FusionScheme scheme, std::uint64_t seed)
        : manifest_(manifest), config_(config), active_(std::move(active)), scheme_(scheme) {
        manifest_.validate();
        config_.validate();
        build_params();
        init_params(seed);
    }

    std::string enc_prefix(std::size_t modality_index) const {
        return "enc." + manifest_.modalities[modality_index].name + ".";
    }

    void build_params() {
        const EncoderConfig& e = config_.encoder;
        for (std::size_t m : active_) {
            const ModalitySpec& spec = manifest_.modalities[m];
            const std::string prefix = enc_prefix(m);
            std::size_t channels = spec.dim;
            if (encoder_kind_for(spec.kind) == EncoderKind::ConvRnn) {
                for (std::size_t li = 0; li < e.conv_filters.size(); ++li) {
                    const std::size_t out_ch = e.conv_filters[li];
                    params_.add(prefix + "conv" + std::to_string(li) + ".w",
                                Tensor({out_ch, channels, e.kernel}));
                    params_.add(prefix + "conv" + std::to_string(li) + ".b", Tensor({out_ch}));
                    channels = out_ch;
                }
            }
            for (const char* n : {"wz", "wr", "wn"})
                params_.add(prefix + "gru." + n, Tensor({e.hidden, channels}));
            for (const char* n : {"uz", "ur", "un"})
                params_.add(prefix + "gru." + n, Tensor({e.hidden, e.hidden}));
            for (const char* n : {"bz", "br", "bn"})
                params_.add(prefix + "gru." + n, Tensor({e.hidden}));
        }
        if (scheme_ == FusionScheme::Attention) {
            params_.add("fusion.w", Tensor({e.hidden, e.hidden}));
            params_.add("fusion.b", Tensor({e.hidden}));
            for (std::size_t k = 0; k < config_.fusion.heads; ++k)
                params_.add("fusion.c" + std::to_string(k), Tensor({e.hidden}));
        }
        params_.add("cls.fc1.w", Tensor({config_.classifier_hidden, fused_dim()}));
        params_.add("cls.fc1.b", Tensor({config_.classifier_hidden}));
        params_.add("cls.fc2.w", Tensor({manifest_.num_classes, config_.classifier_hidden}));
        params_.add("cls.fc2.b", Tensor({manifest_.num_classes}));
    }

    /// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor; fan_in is
    /// the trailing-extent product (rank >= 2) or the tensor's own length.
    /// Coordinates fill in ParamSet order, row-major, one uniform() each.
    void init_params(std::uint64_t seed) {
        Rng rng(derive_stream(seed, streams::kModelInit));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_.tensor(i);
            std::size_t fan_in = 1;
            if (t.rank() >= 2) {
                for (std::size_t d = 1; d < t.rank(); ++d) fan_in *= t.extent(d);
            } else {
                fan_in = t.extent(0);
            }
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::size_t j = 0; j < t.size(); ++j)
                t[j] = bound * (2.0 * rng.uniform() - 1.0);
        }
    }

    EncodeTape encode(const BatchItem& item, std::size_t modality_index, Mode mode,
                      Rng* dropout_rng) const {
        const ModalitySpec& spec = manifest_.modalities[modality_index];
        const std::string prefix = enc_prefix(modality_index);
        const EncoderConfig& e = config_.encoder;
        EncodeTape tape;
        tape.available = item.available[modality_index];
        if (!tape.available) {
            tape.rep = Tensor({1, e.hidden}); // zero-filled stand-in, masked downstream
            return tape;
        }
        Tensor x = item.sample->modalities[modality_index];
        if (encoder_kind_for(spec.kind) == EncoderKind::ConvRnn) {
            for (std::size_t li = 0; li < e.conv_filters.size(); ++li) {
                const std::string lp = prefix + "conv" + std::to_string(li);
                Tensor pre = conv1d_forward(x, params_.at(lp + ".w"), params_.at(lp + ".b"),
                                            e.stride);
                tape.conv_in.push_back(std::move(x));
                x = relu_forward(pre);
                tape.conv_pre.push_back(std::move(pre));
            }
        }
        const GruView gru = GruView::from(params_, prefix + "gru.");
        Tensor out = gru_forward(x, gru, Tensor({e.hidden}), &tape.gru);
        if (mode == Mode::Train && e.dropout > 0.0) {
            if (!dropout_rng)
                throw ContractError("forward: train mode with dropout needs a dropout rng");
            tape.dropout_mask = dropout_mask(out.shape(), e.dropout, *dropout_rng);
            tape.rep = dropout_forward(out, tape.dropout_mask, e.dropout);
        } else {
            tape.rep = std::move(out);
        }
        return tape;
    }

    void encode_backward(const EncodeTape& tape, const Tensor& drep, std::size_t modality_index,
                         GradSet& grads) const {
        const ModalitySpec& spec = manifest_.modalities[modality_index];
        const std::string prefix = enc_prefix(modality_index);
        const EncoderConfig& e = config_.encoder;
        Tensor d_gru_out = tape.dropout_mask.size() > 0
                               ? dropout_backward(drep, tape.dropout_mask, e.dropout)
                               : drep;
        const GruView gru = GruView::from(params_, prefix + "gru.");
        GruGradView ggrads = GruGradView::from(grads, prefix + "gru.");
        Tensor dx = gru_backward(tape.gru, gru, d_gru_out, ggrads);
        if (encoder_kind_for(spec.kind) == EncoderKind::ConvRnn) {
            for (std::size_t li = e.conv_filters.size(); li-- > 0;) {
                const std::string lp = prefix + "conv" + std::to_string(li);
                Tensor d_pre = relu_backward(tape.conv_pre[li], dx);
                Conv1dGrads cg =
                    conv1d_backward(tape.conv_in[li], params_.at(lp + ".w"), d_pre, e.stride);
                grads.at(lp + ".w") += cg.dkernels;
                grads.at(lp + ".b") += cg.db;
                dx = std::move(cg.dx);
            }
        }
    }

    Tensor forward_core(const Batch& batch, const ForwardOptions& opts, ModelTape& t) const {
        if (batch.empty()) throw ContractError("forward: empty batch");
        const std::size_t C = manifest_.num_classes;
        if (opts.logit_scale && opts.logit_scale->size() != C)
            throw DimensionError("forward: logit_scale has " +
                                 std::to_string(opts.logit_scale->size()) + " entries, expected " +
                                 std::to_string(C));
        t.mode = opts.mode;
        t.logit_scale = opts.logit_scale ? *opts.logit_scale : std::vector<double>{};
        t.enc.clear();
        t.attn.clear();

        std::vector<Tensor> context;
        if (scheme_ == FusionScheme::Attention)
            for (std::size_t k = 0; k < config_.fusion.heads; ++k)
                context.push_back(params_.at("fusion.c" + std::to_string(k)));

        t.fused = Tensor({batch.size(), fused_dim()});
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const BatchItem& item = batch[b];
            if (!item.sample) throw ContractError("forward: batch item without a sample");
            if (item.available.size() != manifest_.modalities.size())
                throw DimensionError("forward: sample '" + item.sample->id +
                                     "' availability does not cover the manifest");
            std::vector<EncodeTape> enc;
            std::vector<Tensor> reps;
            std::vector<std::vector<bool>> masks;
            enc.reserve(active_.size());
            for (std::size_t m : active_) {
                EncodeTape et = encode(item, m, opts.mode, opts.dropout_rng);
                reps.push_back(et.rep);
                masks.emplace_back(et.rep.extent(0), et.available);
                enc.push_back(std::move(et));
            }
            Tensor fused_row;
            if (scheme_ == FusionScheme::Attention) {
                AttnTape at;
                fused_row = fuse_attention(reps, masks, params_.at("fusion.w"),
                                           params_.at("fusion.b"), context, &at);
                t.attn.push_back(std::move(at));
            } else {
                fused_row = fuse_concat(reps, masks);
            }
            for (std::size_t j = 0; j < fused_row.size(); ++j) t.fused.at(b, j) = fused_row[j];
            t.enc.push_back(std::move(enc));
        }

        t.fc1_pre = dense_forward(t.fused, params_.at("cls.fc1.w"), params_.at("cls.fc1.b"));
        t.fc1_post = relu_forward(t.fc1_pre);
        if (opts.mode == Mode::Train && config_.encoder.dropout > 0.0) {
            if (!opts.dropout_rng)
                throw ContractError("forward: train mode with dropout needs a dropout rng");
            t.cls_dropout_mask =
                dropout_mask(t.fc1_post.shape(), config_.encoder.dropout, *opts.dropout_rng);
            t.fc1_dropped = dropout_forward(t.fc1_post, t.cls_dropout_mask, config_.encoder.dropout);
        } else {
            t.cls_dropout_mask = Tensor({0});
            t.fc1_dropped = t.fc1_post;
        }
        Tensor logits = dense_forward(t.fc1_dropped, params_.at("cls.fc2.w"), params_.at("cls.fc2.b"));
        if (opts.logit_scale)
            for (std::size_t b = 0; b < logits.extent(0); ++b)
                for (std::size_t c = 0; c < C; ++c) logits.at(b, c) *= (*opts.logit_scale)[c];
        return logits;
    }

    DatasetManifest manifest_;
    ModelConfig config_;
    std::vector<std::size_t> active_; // manifest indices, ascending
    FusionScheme scheme_;
    ParamSet params_;
};

} // namespace fedsim
