#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nanmerge/checkpoint.hpp"
#include "nanmerge/dtype.hpp"
#include "nanmerge/errors.hpp"
#include "nanmerge/tensor.hpp"

namespace nanmerge {

enum class DTypePolicy { preserve, force_f32 };

namespace detail {

inline std::size_t opaque_byte_width(const std::string& dtype) {
    static const std::map<std::string, std::size_t> widths = {
        {"BOOL", 1}, {"U8", 1},  {"I8", 1},  {"F8_E4M3", 1}, {"F8_E5M2", 1},
        {"I16", 2},  {"U16", 2}, {"I32", 4}, {"U32", 4},     {"I64", 8},
        {"U64", 8},  {"F16", 2}, {"BF16", 2}, {"F32", 4},    {"F64", 8},
    };
    auto it = widths.find(dtype);
    if (it == widths.end())
        throw UnsupportedDType("unknown safetensors dtype '" + dtype + "'");
    return it->second;
}

inline void encode_tensor(const Tensor& t, DType as, std::vector<std::uint8_t>& out) {
    auto push = [&out](const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    };
    for (double v : t.values()) {
        switch (as) {
            case DType::F16: {
                float f = float(v);
                uint16_t h = encode_f16(f);
                if (std::isfinite(v) && !std::isfinite(double(decode_f16(h))))
                    throw OverflowOnCast("value exceeds F16 range on write");
                push(&h, 2);
                break;
            }
            case DType::BF16: {
                float f = float(v);
                uint16_t h = encode_bf16(f);
                if (std::isfinite(v) && !std::isfinite(double(decode_bf16(h))))
                    throw OverflowOnCast("value exceeds BF16 range on write");
                push(&h, 2);
                break;
            }
            case DType::F32: {
                if (std::isfinite(v) && std::abs(v) >= 0x1.ffffffp+127)
                    throw OverflowOnCast("value exceeds F32 range on write");
                float f = float(v);
                push(&f, 4);
                break;
            }
            case DType::F64: push(&v, 8); break;
        }
    }
}

inline Tensor decode_tensor(const std::uint8_t* data, std::size_t nbytes, DType dtype,
                            std::vector<std::size_t> shape) {
    Tensor t(std::move(shape), dtype);
    auto dst = t.values();
    switch (dtype) {
        case DType::F16:
            for (std::size_t i = 0; i < dst.size(); ++i) {
                uint16_t h;
                std::memcpy(&h, data + 2 * i, 2);
                dst[i] = double(decode_f16(h));
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < dst.size(); ++i) {
                uint16_t h;
                std::memcpy(&h, data + 2 * i, 2);
                dst[i] = double(decode_bf16(h));
            }
            break;
        case DType::F32:
            for (std::size_t i = 0; i < dst.size(); ++i) {
                float f;
                std::memcpy(&f, data + 4 * i, 4);
                dst[i] = double(f);
            }
            break;
        case DType::F64:
            std::memcpy(dst.data(), data, nbytes);
            break;
    }
    return t;
}

}  // namespace detail

/// Parses a safetensors file: 8-byte little-endian header length, JSON
/// header, contiguous data region. Mergeable float dtypes decode to Tensor;
/// anything else is carried as an opaque blob.
inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open '" + path.string() + "' for reading");
    std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (in.bad()) throw IoFailure("read error on '" + path.string() + "'");
    if (file.size() < 8)
        throw CorruptHeader("'" + path.string() + "': file is " + std::to_string(file.size()) +
                            " bytes, need at least 8 (byte offset 0)");
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | file[std::size_t(i)];
    if (header_len > file.size() - 8)
        throw CorruptHeader("'" + path.string() + "': header length " +
                            std::to_string(header_len) + " exceeds file size (byte offset 0)");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(file.begin() + 8, file.begin() + 8 + long(header_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw CorruptHeader("'" + path.string() + "': header JSON invalid at byte offset " +
                            std::to_string(8 + e.byte) + ": " + e.what());
    }
    if (!header.is_object())
        throw CorruptHeader("'" + path.string() + "': header is not a JSON object (byte offset 8)");

    const std::size_t data_size = file.size() - 8 - header_len;
    const std::uint8_t* data = file.data() + 8 + header_len;

    Checkpoint ckpt;
    struct Span {
        std::size_t begin, end;
        std::string name;
    };
    std::vector<Span> spans;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        if (name == "__metadata__") {
            if (!it.value().is_object())
                throw CorruptHeader("'" + path.string() + "': __metadata__ is not an object");
            for (auto m = it.value().begin(); m != it.value().end(); ++m) {
                if (!m.value().is_string())
                    throw CorruptHeader("'" + path.string() + "': __metadata__." + m.key() +
                                        " is not a string");
                ckpt.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        const nlohmann::json& e = it.value();
        if (!e.is_object() || !e.contains("dtype") || !e.contains("shape") ||
            !e.contains("data_offsets"))
            throw CorruptHeader("'" + path.string() + "': entry '" + name +
                                "' missing dtype/shape/data_offsets");
        const std::string dtype_str = e["dtype"].get<std::string>();
        std::vector<std::size_t> shape;
        for (const auto& dim : e["shape"]) {
            if (!dim.is_number_unsigned())
                throw CorruptHeader("'" + path.string() + "': entry '" + name +
                                    "' has a negative or non-integer extent");
            shape.push_back(dim.get<std::size_t>());
        }
        const auto& off = e["data_offsets"];
        if (!off.is_array() || off.size() != 2)
            throw CorruptHeader("'" + path.string() + "': entry '" + name +
                                "' data_offsets must be [begin, end)");
        const std::size_t begin = off[0].get<std::size_t>();
        const std::size_t end = off[1].get<std::size_t>();
        if (end < begin || end > data_size)
            throw CorruptHeader("'" + path.string() + "': entry '" + name + "' offsets [" +
                                std::to_string(begin) + "," + std::to_string(end) +
                                ") outside data region of " + std::to_string(data_size) +
                                " bytes");
        const std::size_t count = Tensor::element_count(shape);
        const std::size_t width = detail::opaque_byte_width(dtype_str);
        if (end - begin != count * width)
            throw CorruptHeader("'" + path.string() + "': entry '" + name + "' spans " +
                                std::to_string(end - begin) + " bytes but shape needs " +
                                std::to_string(count * width));
        spans.push_back({begin, end, name});

        DType dtype;
        if (dtype_from_name(dtype_str, dtype)) {
            ckpt.entries.emplace(name,
                                 detail::decode_tensor(data + begin, end - begin, dtype, shape));
        } else {
            OpaqueTensor o;
            o.dtype = dtype_str;
            o.shape = shape;
            o.bytes.assign(data + begin, data + end);
            ckpt.opaque.emplace(name, std::move(o));
        }
    }
    std::sort(spans.begin(), spans.end(),
              [](const Span& a, const Span& b) { return a.begin < b.begin; });
    std::size_t cursor = 0;
    for (const Span& s : spans) {
        if (s.begin != cursor)
            throw CorruptHeader("'" + path.string() + "': entry '" + s.name +
                                "' begins at data offset " + std::to_string(s.begin) +
                                ", expected " + std::to_string(cursor) +
                                " (offsets must be contiguous and non-overlapping)");
        cursor = s.end;
    }
    if (cursor != data_size)
        throw CorruptHeader("'" + path.string() + "': data region has " +
                            std::to_string(data_size) + " bytes but entries cover " +
                            std::to_string(cursor));
    return ckpt;
}

/// Canonical writer: names sorted lexicographically, offsets assigned in
/// that order, compact header JSON with sorted keys. Two writes of the same
/// checkpoint are byte-identical.
inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                             DTypePolicy policy = DTypePolicy::preserve) {
    nlohmann::json header = nlohmann::json::object();
    std::vector<std::uint8_t> payload;
    // std::map iteration is already lexicographic; merge both entry kinds in order
    auto eit = ckpt.entries.begin();
    auto oit = ckpt.opaque.begin();
    auto emit_entry = [&](const std::string& name, const std::string& dtype_str,
                          const std::vector<std::size_t>& shape,
                          const std::vector<std::uint8_t>& bytes) {
        std::size_t begin = payload.size();
        payload.insert(payload.end(), bytes.begin(), bytes.end());
        header[name] = {{"dtype", dtype_str},
                        {"shape", shape},
                        {"data_offsets", {begin, payload.size()}}};
    };
    while (eit != ckpt.entries.end() || oit != ckpt.opaque.end()) {
        bool take_entry = oit == ckpt.opaque.end() ||
                          (eit != ckpt.entries.end() && eit->first < oit->first);
        if (take_entry) {
            DType as = policy == DTypePolicy::force_f32 ? DType::F32 : eit->second.dtype();
            std::vector<std::uint8_t> bytes;
            bytes.reserve(eit->second.size() * byte_width(as));
            detail::encode_tensor(eit->second, as, bytes);
            emit_entry(eit->first, dtype_name(as), eit->second.shape(), bytes);
            ++eit;
        } else {
            emit_entry(oit->first, oit->second.dtype, oit->second.shape, oit->second.bytes);
            ++oit;
        }
    }
    if (!ckpt.metadata.empty()) {
        nlohmann::json meta = nlohmann::json::object();
        for (const auto& [k, v] : ckpt.metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open '" + path.string() + "' for writing");
    std::uint64_t len = header_str.size();
    char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = char((len >> (8 * i)) & 0xFF);
    out.write(len_bytes, 8);
    out.write(header_str.data(), long(header_str.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), long(payload.size()));
    if (!out) throw IoFailure("write error on '" + path.string() + "'");
}

/// Cross-checkpoint consistency report; never throws, only describes.
struct AlignmentReport {
    bool ok = true;
    // key -> per-model presence
    std::map<std::string, std::vector<bool>> presence;
    std::vector<std::string> shape_conflicts;
    std::vector<std::string> dtype_conflicts;
    std::vector<std::string> missing;  // "model i lacks 'key'"
};

inline AlignmentReport validate_alignment(const std::vector<Checkpoint>& ckpts) {
    if (ckpts.size() < 2) throw ValidationError("validate_alignment: need at least 2 checkpoints");
    AlignmentReport rep;
    std::set<std::string> all_keys;
    for (const Checkpoint& c : ckpts)
        for (const auto& [name, t] : c.entries) all_keys.insert(name);
    for (const std::string& key : all_keys) {
        std::vector<bool> present;
        const Tensor* ref = nullptr;
        std::size_t ref_model = 0;
        for (std::size_t i = 0; i < ckpts.size(); ++i) {
            auto it = ckpts[i].entries.find(key);
            present.push_back(it != ckpts[i].entries.end());
            if (it == ckpts[i].entries.end()) {
                rep.ok = false;
                rep.missing.push_back("model " + std::to_string(i) + " lacks '" + key + "'");
                continue;
            }
            if (!ref) {
                ref = &it->second;
                ref_model = i;
                continue;
            }
            if (it->second.shape() != ref->shape()) {
                rep.ok = false;
                rep.shape_conflicts.push_back(
                    "'" + key + "': " + shape_string(ref->shape()) + " (model " +
                    std::to_string(ref_model) + ") vs " + shape_string(it->second.shape()) +
                    " (model " + std::to_string(i) + ")");
            }
            if (it->second.dtype() != ref->dtype()) {
                rep.ok = false;
                rep.dtype_conflicts.push_back("'" + key + "': " +
                                              std::string(dtype_name(ref->dtype())) + " vs " +
                                              dtype_name(it->second.dtype()));
            }
        }
        rep.presence.emplace(key, std::move(present));
    }
    return rep;
}

}  // namespace nanmerge
