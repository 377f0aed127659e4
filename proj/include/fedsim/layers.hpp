// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/param_set.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

// Dense, 1-D convolution, GRU, softmax cross-entropy, and dropout, each with
// an analytic backward pass. There is no graph autodiff: the model layer
// chains these by hand, and finite differences (gradcheck.hpp) guard the
// algebra.

namespace fedsim {

// ---------------------------------------------------------------------------
// Dense: y = x W^T + b, broadcast over leading dimensions of x.
// ---------------------------------------------------------------------------

inline Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2)
        throw DimensionError("dense_forward: weight must be rank 2, got " + w.shape_string());
    const std::size_t n_out = w.extent(0);
    const std::size_t n_in = w.extent(1);
    if (x.rank() == 0 || x.shape().back() != n_in)
        throw DimensionError("dense_forward: input " + x.shape_string() +
                             " does not match weight " + w.shape_string());
    if (b.size() != n_out)
        throw DimensionError("dense_forward: bias " + b.shape_string() +
                             " does not match weight " + w.shape_string());

    const std::size_t rows = x.size() / n_in;
    std::vector<std::size_t> out_shape(x.shape());
    out_shape.back() = n_out;
    Tensor y(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n_in;
        double* yr = y.data() + r * n_out;
        for (std::size_t o = 0; o < n_out; ++o) {
            const double* wo = w.data() + o * n_in;
            double s = b[o];
            for (std::size_t i = 0; i < n_in; ++i) s += xr[i] * wo[i];
            yr[o] = s;
        }
    }
    return y;
}

struct DenseGrads {
    Tensor dx, dw, db;
};

inline DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
    const std::size_t n_out = w.extent(0);
    const std::size_t n_in = w.extent(1);
    const std::size_t rows = x.size() / n_in;
    DenseGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({n_out})};
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n_in;
        const double* dyr = dy.data() + r * n_out;
        double* dxr = g.dx.data() + r * n_in;
        for (std::size_t o = 0; o < n_out; ++o) {
            const double d = dyr[o];
            const double* wo = w.data() + o * n_in;
            double* dwo = g.dw.data() + o * n_in;
            g.db[o] += d;
            for (std::size_t i = 0; i < n_in; ++i) {
                dxr[i] += d * wo[i];
                dwo[i] += d * xr[i];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// 1-D convolution over time, valid padding.
// x: [T, C_in], kernels: [C_out, C_in, K], bias: [C_out] -> [T', C_out]
// with T' = floor((T - K) / stride) + 1.
// ---------------------------------------------------------------------------

inline Tensor conv1d_forward(const Tensor& x, const Tensor& kernels, const Tensor& b,
                             std::size_t stride = 1) {
    if (x.rank() != 2 || kernels.rank() != 3)
        throw DimensionError("conv1d_forward: expected x [T, C_in] and kernels [C_out, C_in, K], got " +
                             x.shape_string() + " and " + kernels.shape_string());
    const std::size_t t_in = x.extent(0);
    const std::size_t c_in = x.extent(1);
    const std::size_t c_out = kernels.extent(0);
    const std::size_t k = kernels.extent(2);
    if (kernels.extent(1) != c_in)
        throw DimensionError("conv1d_forward: kernel channels " + kernels.shape_string() +
                             " do not match input " + x.shape_string());
    if (b.size() != c_out)
        throw DimensionError("conv1d_forward: bias " + b.shape_string() + " does not match kernels " +
                             kernels.shape_string());
    if (k % 2 == 0) throw ValueError("conv1d_forward: kernel length must be odd, got " + std::to_string(k));
    if (stride == 0) throw ValueError("conv1d_forward: stride must be positive");
    if (t_in < k)
        throw DimensionError("conv1d_forward: sequence too short, " + std::to_string(t_in) +
                             " steps for kernel length " + std::to_string(k));

    const std::size_t t_out = (t_in - k) / stride + 1;
    Tensor y({t_out, c_out});
    for (std::size_t t = 0; t < t_out; ++t) {
        const std::size_t base = t * stride;
        for (std::size_t o = 0; o < c_out; ++o) {
            double s = b[o];
            for (std::size_t c = 0; c < c_in; ++c)
                for (std::size_t j = 0; j < k; ++j) s += x.at(base + j, c) * kernels.at(o, c, j);
            y.at(t, o) = s;
        }
    }
    return y;
}

struct Conv1dGrads {
    Tensor dx, dkernels, db;
};

inline Conv1dGrads conv1d_backward(const Tensor& x, const Tensor& kernels, const Tensor& dy,
                                   std::size_t stride = 1) {
    const std::size_t c_in = x.extent(1);
    const std::size_t c_out = kernels.extent(0);
    const std::size_t k = kernels.extent(2);
    const std::size_t t_out = dy.extent(0);
    Conv1dGrads g{Tensor(x.shape()), Tensor(kernels.shape()), Tensor({c_out})};
    for (std::size_t t = 0; t < t_out; ++t) {
        const std::size_t base = t * stride;
        for (std::size_t o = 0; o < c_out; ++o) {
            const double d = dy.at(t, o);
            g.db[o] += d;
            for (std::size_t c = 0; c < c_in; ++c)
                for (std::size_t j = 0; j < k; ++j) {
                    g.dx.at(base + j, c) += d * kernels.at(o, c, j);
                    g.dkernels.at(o, c, j) += d * x.at(base + j, c);
                }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

inline Tensor relu_forward(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

/// dx from pre-activation input and upstream dy.
inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    return dx;
}

// ---------------------------------------------------------------------------
// GRU. Cell equations, with sigma the logistic function:
//   z_t = sigma(Wz x_t + Uz h_{t-1} + bz)
//   r_t = sigma(Wr x_t + Ur h_{t-1} + br)
//   n_t = tanh(Wn x_t + Un (r_t . h_{t-1}) + bn)
//   h_t = (1 - z_t) . n_t + z_t . h_{t-1}
// Weight names inside a ParamSet: wz wr wn ([H, D]), uz ur un ([H, H]),
// bz br bn ([H]), optionally under a prefix.
// ---------------------------------------------------------------------------

struct GruView {
    const Tensor *wz, *wr, *wn, *uz, *ur, *un, *bz, *br, *bn;

    static GruView from(const ParamSet& p, const std::string& prefix = "") {
        return GruView{&p.at(prefix + "wz"), &p.at(prefix + "wr"), &p.at(prefix + "wn"),
                       &p.at(prefix + "uz"), &p.at(prefix + "ur"), &p.at(prefix + "un"),
                       &p.at(prefix + "bz"), &p.at(prefix + "br"), &p.at(prefix + "bn")};
    }

    std::size_t hidden() const { return wz->extent(0); }
    std::size_t input_dim() const { return wz->extent(1); }
};

struct GruGradView {
    Tensor *dwz, *dwr, *dwn, *duz, *dur, *dun, *dbz, *dbr, *dbn;

    static GruGradView from(GradSet& g, const std::string& prefix = "") {
        return GruGradView{&g.at(prefix + "wz"), &g.at(prefix + "wr"), &g.at(prefix + "wn"),
                           &g.at(prefix + "uz"), &g.at(prefix + "ur"), &g.at(prefix + "un"),
                           &g.at(prefix + "bz"), &g.at(prefix + "br"), &g.at(prefix + "bn")};
    }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Per-sequence intermediates kept for backpropagation through time.
struct GruTape {
    Tensor x;        // [T, D] input
    Tensor h0;       // [H]
    Tensor z, r, n;  // [T, H] gate activations
    Tensor rh;       // [T, H] r_t . h_{t-1}
    Tensor h;        // [T, H] hidden states
};

inline Tensor gru_forward(const Tensor& x, const GruView& w, const Tensor& h0,
                          GruTape* tape = nullptr) {
    if (x.rank() != 2)
        throw DimensionError("gru_forward: expected x [T, D], got " + x.shape_string());
    const std::size_t t_len = x.extent(0);
    const std::size_t d = x.extent(1);
    const std::size_t h_dim = w.hidden();
    if (t_len == 0) throw DimensionError("gru_forward: empty sequence");
    if (w.input_dim() != d)
        throw DimensionError("gru_forward: input dim " + std::to_string(d) +
                             " does not match weights expecting " + std::to_string(w.input_dim()));
    if (h0.size() != h_dim)
        throw DimensionError("gru_forward: h0 " + h0.shape_string() + " does not match hidden size " +
                             std::to_string(h_dim));

    Tensor z({t_len, h_dim}), r({t_len, h_dim}), n({t_len, h_dim}), rh({t_len, h_dim}),
        h({t_len, h_dim});
    std::vector<double> prev(h0.values());
    std::vector<double> az(h_dim), ar(h_dim), an(h_dim);
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* xt = x.data() + t * d;
        for (std::size_t i = 0; i < h_dim; ++i) {
            double sz = (*w.bz)[i], sr = (*w.br)[i];
            const double* wzi = w.wz->data() + i * d;
            const double* wri = w.wr->data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
                sz += wzi[j] * xt[j];
                sr += wri[j] * xt[j];
            }
            const double* uzi = w.uz->data() + i * h_dim;
            const double* uri = w.ur->data() + i * h_dim;
            for (std::size_t j = 0; j < h_dim; ++j) {
                sz += uzi[j] * prev[j];
                sr += uri[j] * prev[j];
            }
            az[i] = sz;
            ar[i] = sr;
        }
        for (std::size_t i = 0; i < h_dim; ++i) {
            z.at(t, i) = sigmoid(az[i]);
            r.at(t, i) = sigmoid(ar[i]);
            rh.at(t, i) = r.at(t, i) * prev[i];
        }
        for (std::size_t i = 0; i < h_dim; ++i) {
            double sn = (*w.bn)[i];
            const double* wni = w.wn->data() + i * d;
            for (std::size_t j = 0; j < d; ++j) sn += wni[j] * xt[j];
            const double* uni = w.un->data() + i * h_dim;
            for (std::size_t j = 0; j < h_dim; ++j) sn += uni[j] * rh.at(t, j);
            an[i] = sn;
        }
        for (std::size_t i = 0; i < h_dim; ++i) {
            n.at(t, i) = std::tanh(an[i]);
            h.at(t, i) = (1.0 - z.at(t, i)) * n.at(t, i) + z.at(t, i) * prev[i];
        }
        for (std::size_t i = 0; i < h_dim; ++i) prev[i] = h.at(t, i);
    }
    if (tape) *tape = GruTape{x, h0, z, r, n, rh, h};
    return h;
}

/// Backpropagation through time. dh_seq holds the upstream gradient for every
/// hidden state; parameter gradients accumulate into g. Returns dx.
inline Tensor gru_backward(const GruTape& tape, const GruView& w, const Tensor& dh_seq,
                           GruGradView g) {
    const std::size_t t_len = tape.x.extent(0);
    const std::size_t d = tape.x.extent(1);
    const std::size_t h_dim = w.hidden();
    Tensor dx({t_len, d});
    std::vector<double> dh(h_dim, 0.0);       // gradient flowing into h_t
    std::vector<double> daz(h_dim), dar(h_dim), dan(h_dim), dh_prev(h_dim);
    for (std::size_t t = t_len; t-- > 0;) {
        const double* hp = (t == 0) ? tape.h0.data() : tape.h.data() + (t - 1) * h_dim;
        for (std::size_t i = 0; i < h_dim; ++i) dh[i] += dh_seq.at(t, i);

        for (std::size_t i = 0; i < h_dim; ++i) {
            const double zt = tape.z.at(t, i), nt = tape.n.at(t, i);
            const double dz = dh[i] * (hp[i] - nt);
            const double dn = dh[i] * (1.0 - zt);
            daz[i] = dz * zt * (1.0 - zt);
            dan[i] = dn * (1.0 - nt * nt);
        }
        // d(rh) = Un^T dan;  dr = d(rh) . h_{t-1}
        for (std::size_t i = 0; i < h_dim; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < h_dim; ++j) s += w.un->at(j, i) * dan[j];
            const double rt = tape.r.at(t, i);
            dar[i] = s * hp[i] * rt * (1.0 - rt);
            // carry d(rh).r into dh_prev below via s * rt
            dh_prev[i] = dh[i] * tape.z.at(t, i) + s * rt;
        }
        const double* xt = tape.x.data() + t * d;
        double* dxt = dx.data() + t * d;
        for (std::size_t i = 0; i < h_dim; ++i) {
            double* dwzi = g.dwz->data() + i * d;
            double* dwri = g.dwr->data() + i * d;
            double* dwni = g.dwn->data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
                dwzi[j] += daz[i] * xt[j];
                dwri[j] += dar[i] * xt[j];
                dwni[j] += dan[i] * xt[j];
                dxt[j] += w.wz->at(i, j) * daz[i] + w.wr->at(i, j) * dar[i] +
                          w.wn->at(i, j) * dan[i];
            }
            double* duzi = g.duz->data() + i * h_dim;
            double* duri = g.dur->data() + i * h_dim;
            double* duni = g.dun->data() + i * h_dim;
            for (std::size_t j = 0; j < h_dim; ++j) {
                duzi[j] += daz[i] * hp[j];
                duri[j] += dar[i] * hp[j];
                duni[j] += dan[i] * tape.rh.at(t, j);
                dh_prev[j] += w.uz->at(i, j) * daz[i] + w.ur->at(i, j) * dar[i];
            }
            (*g.dbz)[i] += daz[i];
            (*g.dbr)[i] += dar[i];
            (*g.dbn)[i] += dan[i];
        }
        dh = dh_prev;
        std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy, numerically stabilized by max subtraction.
// ---------------------------------------------------------------------------

struct SoftmaxResult {
    double loss = 0.0;
    Tensor probs; // [B, C]
};

inline SoftmaxResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("softmax_cross_entropy: expected logits [B, C], got " +
                             logits.shape_string());
    const std::size_t bsz = logits.extent(0);
    const std::size_t c = logits.extent(1);
    if (labels.size() != bsz)
        throw DimensionError("softmax_cross_entropy: batch " + std::to_string(bsz) + " vs " +
                             std::to_string(labels.size()) + " labels");
    SoftmaxResult out;
    out.probs = Tensor({bsz, c});
    double total = 0.0;
    for (std::size_t b = 0; b < bsz; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= c)
            throw ValueError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                             " out of range [0, " + std::to_string(c) + ")");
        const double* row = logits.data() + b * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        const double log_denom = std::log(denom);
        for (std::size_t j = 0; j < c; ++j) out.probs.at(b, j) = std::exp(row[j] - mx) / denom;
        total += -(row[labels[b]] - mx - log_denom);
    }
    out.loss = total / static_cast<double>(bsz);
    if (!std::isfinite(out.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    return out;
}

/// d(mean CE)/d(logits) = (probs - onehot) / B.
inline Tensor softmax_cross_entropy_backward(const Tensor& probs, const std::vector<int>& labels) {
    const std::size_t bsz = probs.extent(0);
    const std::size_t c = probs.extent(1);
    Tensor dlogits(probs.shape());
    const double inv_b = 1.0 / static_cast<double>(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t j = 0; j < c; ++j) dlogits.at(b, j) = probs.at(b, j) * inv_b;
        dlogits.at(b, static_cast<std::size_t>(labels[b])) -= inv_b;
    }
    return dlogits;
}

// ---------------------------------------------------------------------------
// Inverted dropout. Masks are 0/1 tensors drawn once per application; eval
// mode simply skips the layer.
// ---------------------------------------------------------------------------

inline Tensor dropout_mask(const std::vector<std::size_t>& shape, double rate, Rng& rng) {
    Tensor mask(shape);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(rate) ? 0.0 : 1.0;
    return mask;
}

inline Tensor dropout_forward(const Tensor& x, const Tensor& mask, double rate) {
    const double scale = 1.0 / (1.0 - rate);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i] * scale;
    return y;
}

inline Tensor dropout_backward(const Tensor& dy, const Tensor& mask, double rate) {
    return dropout_forward(dy, mask, rate);
}

// ---------------------------------------------------------------------------
// Plain SGD step: w' = w - lr * g.
// ---------------------------------------------------------------------------

inline void sgd_step_inplace(ParamSet& params, const GradSet& grads, double lr) {
    if (!(lr > 0.0)) throw ValueError("sgd_step: learning rate must be positive");
    params.require_congruent(grads, "sgd_step");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads.tensor(i).all_finite())
            throw NumericError("sgd_step: non-finite gradient in '" + grads.name(i) + "'");
        params.tensor(i).add_scaled(grads.tensor(i), -lr);
    }
}

inline ParamSet sgd_step(ParamSet params, const GradSet& grads, double lr) {
    sgd_step_inplace(params, grads, lr);
    return params;
}

} // namespace fedsim
