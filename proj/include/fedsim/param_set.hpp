// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

/// Ordered collection of named tensors. Entry order is fixed at construction
/// and is identical for every model built from the same configuration, which
/// is what makes flat-vector aggregation well defined across clients.
class ParamSet {
public:
    void add(std::string name, Tensor t) {
        if (index_.count(name))
            throw ContractError("ParamSet: duplicate entry '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamSet: no entry '" + name + "'");
        return entries_[it->second].second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamSet: no entry '" + name + "'");
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_[i].first; }
    Tensor& tensor(std::size_t i) { return entries_[i].second; }
    const Tensor& tensor(std::size_t i) const { return entries_[i].second; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    /// Two sets are congruent when names, order, and shapes all agree.
    bool congruent_with(const ParamSet& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].first != other.entries_[i].first) return false;
            if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
        }
        return true;
    }

    void require_congruent(const ParamSet& other, const char* what) const {
        if (!congruent_with(other))
            throw DimensionError(std::string(what) + ": parameter sets are not congruent");
    }

    std::size_t flat_size() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.size();
        return n;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(flat_size());
        for (const auto& [_, t] : entries_)
            out.insert(out.end(), t.values().begin(), t.values().end());
        return out;
    }

    void unflatten(const std::vector<double>& flat) {
        if (flat.size() != flat_size())
            throw DimensionError("unflatten: flat length " + std::to_string(flat.size()) +
                                 " != expected " + std::to_string(flat_size()));
        std::size_t off = 0;
        for (auto& [_, t] : entries_) {
            std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.values().begin());
            off += t.size();
        }
    }

    /// Same names and shapes, all values zero.
    ParamSet zeros_like() const {
        ParamSet z;
        for (const auto& [name, t] : entries_) z.add(name, Tensor(t.shape()));
        return z;
    }

    bool all_finite() const {
        for (const auto& [_, t] : entries_)
            if (!t.all_finite()) return false;
        return true;
    }

    ParamSet& operator+=(const ParamSet& other) {
        require_congruent(other, "ParamSet +=");
        for (std::size_t i = 0; i < entries_.size(); ++i)
            entries_[i].second += other.entries_[i].second;
        return *this;
    }

    ParamSet& operator-=(const ParamSet& other) {
        require_congruent(other, "ParamSet -=");
        for (std::size_t i = 0; i < entries_.size(); ++i)
            entries_[i].second -= other.entries_[i].second;
        return *this;
    }

    ParamSet& operator*=(double s) {
        for (auto& [_, t] : entries_) t *= s;
        return *this;
    }

    /// this += s * other
    ParamSet& add_scaled(const ParamSet& other, double s) {
        require_congruent(other, "ParamSet add_scaled");
        for (std::size_t i = 0; i < entries_.size(); ++i)
            entries_[i].second.add_scaled(other.entries_[i].second, s);
        return *this;
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Gradients carry the same structure as the parameters they belong to.
using GradSet = ParamSet;

inline ParamSet operator-(ParamSet a, const ParamSet& b) { return a -= b; }
inline ParamSet operator+(ParamSet a, const ParamSet& b) { return a += b; }

inline bool operator==(const ParamSet& a, const ParamSet& b) {
    if (!a.congruent_with(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!(a.tensor(i) == b.tensor(i))) return false;
    return true;
}

inline double max_abs_diff(const ParamSet& a, const ParamSet& b) {
    a.require_congruent(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, max_abs_diff(a.tensor(i), b.tensor(i)));
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoint archive: little-endian binary, exact 64-bit round trip.
//
//   magic   8 bytes  "FSIMPAR1"
//   count   u32      number of entries
//   per entry:
//     name_len u32, name bytes,
//     ndim u32, dims u64[ndim],
//     data f64[prod(dims)]
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ParseError("checkpoint: truncated u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw ParseError("checkpoint: truncated u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) {
    const std::uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

} // namespace detail

inline void save_params(const ParamSet& params, std::ostream& os) {
    os.write("FSIMPAR1", 8);
    detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u64(os, d);
        for (double v : t.values()) detail::put_f64(os, v);
    }
}

inline void save_params(const ParamSet& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open checkpoint for writing: " + path);
    save_params(params, os);
    if (!os) throw Error("checkpoint write failed: " + path);
}

inline ParamSet load_params(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "FSIMPAR1", 8) != 0)
        throw ParseError("checkpoint: bad magic");
    const std::uint32_t n = detail::get_u32(is);
    ParamSet out;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw ParseError("checkpoint: truncated name");
        const std::uint32_t ndim = detail::get_u32(is);
        std::vector<std::size_t> shape(ndim);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<std::size_t>(detail::get_u64(is));
            total *= shape[d];
        }
        std::vector<double> data(total);
        for (std::size_t k = 0; k < total; ++k) data[k] = detail::get_f64(is);
        out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

inline ParamSet load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint: " + path);
    return load_params(is);
}

} // namespace fedsim
