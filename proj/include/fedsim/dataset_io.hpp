// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Rendering helpers
// ---------------------------------------------------------------------------

/// The sample line format's decimal rendering: 10 significant digits.
inline std::string render_g10(double v) {
    if (!std::isfinite(v)) throw ValueError("render_g10: non-finite value");
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

namespace detail {

inline void append_json_string(std::string& out, std::string_view s) {
    out += '"';
    for (char ch : s) {
        switch (ch) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\b': out += "\\b"; break;
            case '\f': out += "\\f"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(ch) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof buf, "\\u%04x", static_cast<unsigned>(ch));
                    out += buf;
                } else {
                    out += ch;
                }
        }
    }
    out += '"';
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw SchemaError(where + ": unknown key '" + key + "'");
}

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint32_t f32_bits(float f) {
    std::uint32_t u;
    static_assert(sizeof u == sizeof f);
    __builtin_memcpy(&u, &f, sizeof u);
    return u;
}

inline float f32_from_bits(std::uint32_t u) {
    float f;
    __builtin_memcpy(&f, &u, sizeof f);
    return f;
}

inline constexpr char kSidecarMagic[8] = {'F', 'S', 'I', 'M', 'F', '3', '2', '\0'};

} // namespace detail

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline std::string to_string(ModalityKind k) {
    return k == ModalityKind::Signal ? "signal" : "embedding";
}

inline ModalityKind modality_kind_from_string(const std::string& s) {
    if (s == "signal") return ModalityKind::Signal;
    if (s == "embedding") return ModalityKind::Embedding;
    throw SchemaError("unknown modality kind '" + s + "' (expected signal or embedding)");
}

inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    manifest.validate();
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["name"] = manifest.name;
    j["num_classes"] = manifest.num_classes;
    j["protocol"] = manifest.protocol == SplitProtocol::KFold ? "kfold" : "predefined";
    if (manifest.protocol == SplitProtocol::KFold) j["folds"] = manifest.folds;
    j["metric"] = to_string(manifest.metric);
    j["modalities"] = nlohmann::ordered_json::array();
    for (const ModalitySpec& m : manifest.modalities)
        j["modalities"].push_back({{"name", m.name},
                                   {"dim", m.dim},
                                   {"max_len", m.max_len},
                                   {"kind", to_string(m.kind)}});
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << j.dump(2) << '\n';
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    try {
        detail::reject_unknown_keys(
            j, {"version", "name", "num_classes", "protocol", "folds", "metric", "modalities"},
            "manifest");
        if (j.value("version", 0) != 1)
            throw SchemaError("manifest: unsupported version (expected 1)");
        DatasetManifest m;
        m.name = j.at("name").get<std::string>();
        m.num_classes = j.at("num_classes").get<std::size_t>();
        const auto protocol = j.at("protocol").get<std::string>();
        if (protocol == "predefined") {
            m.protocol = SplitProtocol::Predefined;
        } else if (protocol == "kfold") {
            m.protocol = SplitProtocol::KFold;
            m.folds = j.at("folds").get<std::size_t>();
        } else {
            throw SchemaError("manifest: unknown protocol '" + protocol + "'");
        }
        m.metric = metric_from_string(j.at("metric").get<std::string>());
        for (const auto& jm : j.at("modalities")) {
            detail::reject_unknown_keys(jm, {"name", "dim", "max_len", "kind"},
                                        "manifest modality");
            ModalitySpec spec;
            spec.name = jm.at("name").get<std::string>();
            spec.dim = jm.at("dim").get<std::size_t>();
            spec.max_len = jm.at("max_len").get<std::size_t>();
            if (jm.contains("kind"))
                spec.kind = modality_kind_from_string(jm.at("kind").get<std::string>());
            m.modalities.push_back(std::move(spec));
        }
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Sample records: one JSON object per line. Modality values are nested
// [T][D] arrays rendered with 10 significant digits, null when the modality
// is unavailable, or {"bin": offset} pointing into the float32 sidecar.
// ---------------------------------------------------------------------------

inline void save_samples(const Dataset& dataset, const std::filesystem::path& jsonl_path,
                         const std::filesystem::path& sidecar_path = {}) {
    std::ofstream os(jsonl_path);
    if (!os) throw IoError("cannot open '" + jsonl_path.string() + "' for writing");
    std::ofstream bin;
    const bool use_sidecar = !sidecar_path.empty();
    std::uint64_t bin_offset = 0;
    if (use_sidecar) {
        bin.open(sidecar_path, std::ios::binary);
        if (!bin) throw IoError("cannot open '" + sidecar_path.string() + "' for writing");
    }

    const auto& mods = dataset.manifest().modalities;
    std::string line;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Sample& s = dataset[i];
        line.clear();
        line += "{\"id\":";
        detail::append_json_string(line, s.id);
        line += ",\"client_id\":";
        if (s.client_id.empty()) {
            line += "null";
        } else {
            detail::append_json_string(line, s.client_id);
        }
        line += ",\"label\":";
        line += s.label ? std::to_string(*s.label) : "null";
        if (s.split != Split::None) {
            line += ",\"split\":";
            detail::append_json_string(line, to_string(s.split));
        }
        line += ",\"modalities\":{";
        for (std::size_t m = 0; m < mods.size(); ++m) {
            if (m > 0) line += ',';
            detail::append_json_string(line, mods[m].name);
            line += ':';
            const Tensor& x = s.modalities[m];
            if (!s.available[m]) {
                line += "null";
            } else if (use_sidecar) {
                line += "{\"bin\":" + std::to_string(bin_offset) + "}";
                bin.write(detail::kSidecarMagic, 8);
                detail::put_u32_le(bin, static_cast<std::uint32_t>(x.extent(0)));
                detail::put_u32_le(bin, static_cast<std::uint32_t>(x.extent(1)));
                for (std::size_t k = 0; k < x.size(); ++k)
                    detail::put_u32_le(bin, detail::f32_bits(static_cast<float>(x[k])));
                bin_offset += 16 + 4 * x.size();
            } else {
                line += '[';
                for (std::size_t t = 0; t < x.extent(0); ++t) {
                    if (t > 0) line += ',';
                    line += '[';
                    for (std::size_t d = 0; d < x.extent(1); ++d) {
                        if (d > 0) line += ',';
                        line += render_g10(x.at(t, d));
                    }
                    line += ']';
                }
                line += ']';
            }
        }
        line += "}}";
        os << line << '\n';
    }
    if (!os || (use_sidecar && !bin))
        throw IoError("failed writing sample records to '" + jsonl_path.string() + "'");
}

namespace detail {

inline Tensor read_sidecar_block(std::ifstream& bin, const std::filesystem::path& bin_path,
                                 std::uint64_t offset, const ModalitySpec& spec,
                                 const std::string& where) {
    bin.clear();
    bin.seekg(static_cast<std::streamoff>(offset));
    char magic[8];
    bin.read(magic, 8);
    if (!bin || std::memcmp(magic, kSidecarMagic, 8) != 0)
        throw ParseError(where + ": bad sidecar block at offset " + std::to_string(offset) +
                         " in '" + bin_path.string() + "'");
    const std::uint32_t t_len = get_u32_le(bin);
    const std::uint32_t dim = get_u32_le(bin);
    if (dim != spec.dim)
        throw SchemaError(where + ": modality '" + spec.name + "' sidecar dim " +
                          std::to_string(dim) + " != manifest dim " + std::to_string(spec.dim));
    Tensor x({t_len, dim});
    for (std::size_t k = 0; k < x.size(); ++k)
        x[k] = static_cast<double>(f32_from_bits(get_u32_le(bin)));
    if (!bin) throw ParseError(where + ": truncated sidecar block in '" + bin_path.string() + "'");
    return x;
}

} // namespace detail

inline std::vector<Sample> load_samples(const DatasetManifest& manifest,
                                        const std::filesystem::path& jsonl_path,
                                        const std::filesystem::path& sidecar_path = {}) {
    std::ifstream is(jsonl_path);
    if (!is) throw IoError("cannot open '" + jsonl_path.string() + "'");
    std::ifstream bin;

    std::vector<Sample> samples;
    std::string text;
    std::size_t line_no = 0;
    while (std::getline(is, text)) {
        ++line_no;
        if (text.empty()) continue;
        const std::string where = jsonl_path.filename().string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(where + ": " + e.what());
        }
        try {
            detail::reject_unknown_keys(j, {"id", "client_id", "label", "split", "modalities"},
                                        where);
            Sample s;
            s.id = j.at("id").get<std::string>();
            if (j.contains("client_id") && !j.at("client_id").is_null())
                s.client_id = j.at("client_id").get<std::string>();
            if (j.contains("label") && !j.at("label").is_null()) {
                const int label = j.at("label").get<int>();
                if (label < 0 || static_cast<std::size_t>(label) >= manifest.num_classes)
                    throw SchemaError(where + ": label " + std::to_string(label) +
                                      " out of range [0, " +
                                      std::to_string(manifest.num_classes) + ")");
                s.label = label;
            }
            if (j.contains("split")) {
                const auto split = j.at("split").get<std::string>();
                if (split == "train") s.split = Split::Train;
                else if (split == "val") s.split = Split::Val;
                else if (split == "test") s.split = Split::Test;
                else throw SchemaError(where + ": unknown split '" + split + "'");
            }
            const auto& jm = j.at("modalities");
            for (const auto& [key, _] : jm.items())
                manifest.modality_index(key); // throws on unknown modality
            for (const ModalitySpec& spec : manifest.modalities) {
                if (!jm.contains(spec.name))
                    throw SchemaError(where + ": missing modality '" + spec.name + "'");
                const auto& jv = jm.at(spec.name);
                if (jv.is_null()) {
                    s.modalities.push_back(Tensor({0, spec.dim}));
                    s.available.push_back(false);
                } else if (jv.is_object()) {
                    detail::reject_unknown_keys(jv, {"bin"}, where);
                    if (sidecar_path.empty())
                        throw SchemaError(where + ": record references a sidecar but none given");
                    if (!bin.is_open()) {
                        bin.open(sidecar_path, std::ios::binary);
                        if (!bin) throw IoError("cannot open '" + sidecar_path.string() + "'");
                    }
                    s.modalities.push_back(detail::read_sidecar_block(
                        bin, sidecar_path, jv.at("bin").get<std::uint64_t>(), spec, where));
                    s.available.push_back(true);
                } else {
                    if (!jv.is_array())
                        throw SchemaError(where + ": modality '" + spec.name +
                                          "' must be null, an array, or a sidecar reference");
                    const std::size_t t_len = jv.size();
                    Tensor x({t_len, spec.dim});
                    for (std::size_t t = 0; t < t_len; ++t) {
                        const auto& row = jv.at(t);
                        if (!row.is_array() || row.size() != spec.dim)
                            throw SchemaError(where + ": modality '" + spec.name + "' row " +
                                              std::to_string(t) + " has " +
                                              std::to_string(row.size()) + " values, expected " +
                                              std::to_string(spec.dim));
                        for (std::size_t d = 0; d < spec.dim; ++d)
                            x.at(t, d) = row.at(d).get<double>();
                    }
                    s.modalities.push_back(std::move(x));
                    s.available.push_back(true);
                }
            }
            samples.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(where + ": " + e.what());
        }
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Whole-dataset convenience wrappers: <dir>/manifest.json, samples.jsonl,
// and optionally samples.bin.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                         bool binary_sidecar = false) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    save_manifest(dataset.manifest(), dir / "manifest.json");
    save_samples(dataset, dir / "samples.jsonl",
                 binary_sidecar ? dir / "samples.bin" : std::filesystem::path{});
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    DatasetManifest manifest = load_manifest(dir / "manifest.json");
    const std::filesystem::path sidecar = dir / "samples.bin";
    std::vector<Sample> samples =
        load_samples(manifest, dir / "samples.jsonl",
                     std::filesystem::exists(sidecar) ? sidecar : std::filesystem::path{});
    return Dataset(std::move(manifest), std::move(samples));
}

} // namespace fedsim
