#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nanmerge/dtype.hpp"
#include "nanmerge/errors.hpp"

namespace nanmerge {

/// Dense row-major tensor. Values live in float64 regardless of the storage
/// dtype; `dtype` only controls how the tensor is encoded on disk.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, DType dtype)
        : shape_(std::move(shape)), dtype_(dtype), data_(element_count(shape_)) {}
    Tensor(std::vector<std::size_t> shape, DType dtype, std::vector<double> data)
        : shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
        if (data_.size() != element_count(shape_))
            throw ShapeMismatch("tensor data size does not match shape product");
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>{});
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    void set_dtype(DType d) { dtype_ = d; }
    std::size_t size() const { return data_.size(); }
    std::span<const double> values() const { return data_; }
    std::span<double> values() { return data_; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::vector<std::size_t> shape_;
    DType dtype_ = DType::F32;
    std::vector<double> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// output[k] = sum_i weights[i] * tensors[i][k], accumulated in float64 in
/// ascending model index order. Output dtype is F32 unless every input is F64.
inline Tensor elementwise_combine(std::span<const Tensor> tensors,
                                  std::span<const double> weights) {
    if (tensors.empty()) throw EmptyInput("elementwise_combine: no tensors");
    if (tensors.size() != weights.size())
        throw ShapeMismatch("elementwise_combine: weight count " +
                            std::to_string(weights.size()) + " != tensor count " +
                            std::to_string(tensors.size()));
    const auto& shape = tensors[0].shape();
    bool all_f64 = true;
    for (const Tensor& t : tensors) {
        if (t.shape() != shape)
            throw ShapeMismatch("elementwise_combine: shapes " + shape_string(shape) +
                                " vs " + shape_string(t.shape()));
        if (!t.all_finite()) throw NonFiniteInput("elementwise_combine: non-finite tensor value");
        if (t.dtype() != DType::F64) all_f64 = false;
    }
    for (double w : weights)
        if (!std::isfinite(w)) throw NonFiniteInput("elementwise_combine: non-finite weight");

    Tensor out(shape, all_f64 ? DType::F64 : DType::F32);
    auto dst = out.values();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const double w = weights[i];
        auto src = tensors[i].values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * src[k];
    }
    return out;
}

inline Tensor elementwise_combine(const std::vector<Tensor>& tensors,
                                  const std::vector<double>& weights) {
    return elementwise_combine(std::span<const Tensor>(tensors),
                               std::span<const double>(weights));
}

inline double frobenius_norm(const Tensor& t) {
    if (!t.all_finite()) throw NonFiniteInput("frobenius_norm: non-finite value");
    double acc = 0.0;
    for (double v : t.values()) acc += v * v;
    return std::sqrt(acc);
}

/// Group norm: sqrt of the sum of squares over every tensor, tensor order
/// then element order. 0.0 for an all-empty group.
inline double frobenius_norm(std::span<const Tensor> group) {
    double acc = 0.0;
    for (const Tensor& t : group) {
        if (!t.all_finite()) throw NonFiniteInput("frobenius_norm: non-finite value");
        for (double v : t.values()) acc += v * v;
    }
    return std::sqrt(acc);
}

inline double frobenius_norm(const std::vector<Tensor>& group) {
    return frobenius_norm(std::span<const Tensor>(group));
}

/// Re-types a tensor, simulating the round-to-nearest-even narrowing the
/// target storage would apply. Values outside the target's finite range throw.
inline Tensor cast(const Tensor& t, DType target) {
    Tensor out(t.shape(), target);
    auto dst = out.values();
    auto src = t.values();
    // RNE boundary for double -> float; at or above this the conversion
    // produces inf (and the cast itself would be out of range).
    constexpr double f32_overflow = 0x1.ffffffp+127;
    for (std::size_t i = 0; i < src.size(); ++i) {
        double v = src[i];
        if (target != DType::F64 && std::isfinite(v) && std::abs(v) >= f32_overflow)
            throw OverflowOnCast("cast: value exceeds finite range of " +
                                 std::string(dtype_name(target)));
        double r;
        switch (target) {
            case DType::F16: r = double(decode_f16(encode_f16(float(v)))); break;
            case DType::BF16: r = double(decode_bf16(encode_bf16(float(v)))); break;
            case DType::F32: r = double(float(v)); break;
            case DType::F64: r = v; break;
        }
        if (std::isfinite(v) && !std::isfinite(r))
            throw OverflowOnCast("cast: value " + std::to_string(v) +
                                 " exceeds finite range of " + dtype_name(target));
        dst[i] = r;
    }
    return out;
}

}  // namespace nanmerge
