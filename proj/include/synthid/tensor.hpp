#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "synthid/errors.hpp"

namespace synthid {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Fixed 64-byte alignment: vectorized reductions peel by address, so heap
// placement would otherwise leak into float summation order.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major tensor. Owns its storage; copies are deep.
template <typename T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
        if (data.size() != shape_numel(shape))
            throw ConfigError("tensor data size " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
    }

    std::size_t size() const noexcept { return data.size(); }
    int rank() const noexcept { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    T& operator[](std::size_t i) noexcept { return data[i]; }
    const T& operator[](std::size_t i) const noexcept { return data[i]; }

    T* ptr() noexcept { return data.data(); }
    const T* ptr() const noexcept { return data.data(); }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    /// Rows [begin, end) along the leading axis.
    Tensor rows(int begin, int end) const {
        const std::size_t stride = shape.empty() ? 1 : data.size() / static_cast<std::size_t>(shape[0]);
        Shape s = shape;
        s[0] = end - begin;
        Tensor out(s);
        std::copy(data.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                  data.begin() + static_cast<std::ptrdiff_t>(end * stride), out.data.begin());
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }
};

/// Concatenate along the leading axis; trailing dims must agree.
template <typename T>
Tensor<T> cat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) return {};
    Shape s = parts.front().shape;
    int n = 0;
    for (const auto& p : parts) {
        if (!std::equal(p.shape.begin() + 1, p.shape.end(), s.begin() + 1, s.end()))
            throw ConfigError("cat_rows: trailing shape mismatch " + shape_str(p.shape) + " vs " + shape_str(s));
        n += p.shape[0];
    }
    s[0] = n;
    Tensor<T> out(s);
    auto it = out.data.begin();
    for (const auto& p : parts) it = std::copy(p.data.begin(), p.data.end(), it);
    return out;
}

template <typename T>
double sum_squares(const Tensor<T>& t) {
    double acc = 0.0;
    for (T v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
}

} // namespace synthid
