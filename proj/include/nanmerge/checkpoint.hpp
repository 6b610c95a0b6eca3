#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "nanmerge/tensor.hpp"

namespace nanmerge {

/// Tensor whose dtype we do not merge (integers, bools, exotic floats).
/// Carried through verbatim, bytes untouched.
struct OpaqueTensor {
    std::string dtype;  // safetensors dtype string, e.g. "I64"
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;

    bool operator==(const OpaqueTensor&) const = default;
};

/// Ordered name -> tensor map for one model. std::map keeps iteration
/// lexicographic, which is the normalized order everywhere.
struct Checkpoint {
    std::map<std::string, Tensor> entries;
    std::map<std::string, OpaqueTensor> opaque;
    std::map<std::string, std::string> metadata;
};

namespace detail {

inline void fnv1a(std::uint64_t& h, const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
}

}  // namespace detail

/// 64-bit FNV-1a over sorted (name, shape, dtype, little-endian float64
/// payload) plus opaque entries. Used to detect task vectors applied to the
/// wrong base.
inline std::uint64_t fingerprint(const Checkpoint& ckpt) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& [name, t] : ckpt.entries) {
        detail::fnv1a(h, name.data(), name.size());
        for (std::size_t dim : t.shape()) {
            std::uint64_t d = dim;
            detail::fnv1a(h, &d, 8);
        }
        std::uint8_t tag = std::uint8_t(t.dtype());
        detail::fnv1a(h, &tag, 1);
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            detail::fnv1a(h, &bits, 8);
        }
    }
    for (const auto& [name, o] : ckpt.opaque) {
        detail::fnv1a(h, name.data(), name.size());
        detail::fnv1a(h, o.dtype.data(), o.dtype.size());
        detail::fnv1a(h, o.bytes.data(), o.bytes.size());
    }
    return h;
}

/// Per-tensor deltas against a base checkpoint, tagged with the base's
/// fingerprint.
struct TaskVector {
    std::uint64_t base_fingerprint = 0;
    std::map<std::string, Tensor> entries;
    std::vector<std::string> excluded_keys;
};

}  // namespace nanmerge
