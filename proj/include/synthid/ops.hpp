#pragma once

// Differentiable tensor operations used by the networks, the oracle
// feature extractors and the losses.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>

#include "synthid/autograd.hpp"

namespace synthid::ag {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
    Tensor<T> y(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
    return make_op(std::move(y), {x}, [df](Node<T>& self) {
        if (auto* gx = self.parent_grad(0)) {
            const auto& xv = self.parent_value(0);
            for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
        }
    });
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a.shape(), b.shape(), "add");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
    return make_op(std::move(y), {a, b}, [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (auto* g = self.parent_grad(p))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a.shape(), b.shape(), "sub");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
    return make_op(std::move(y), {a, b}, [](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = self.parent_grad(1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a.shape(), b.shape(), "mul");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    return make_op(std::move(y), {a, b}, [](Node<T>& self) {
        const auto& av = self.parent_value(0);
        const auto& bv = self.parent_value(1);
        if (auto* g = self.parent_grad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (auto* g = self.parent_grad(1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a.shape(), b.shape(), "div");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] / b.value()[i];
    return make_op(std::move(y), {a, b}, [](Node<T>& self) {
        const auto& bv = self.parent_value(1);
        if (auto* g = self.parent_grad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / bv[i];
        if (auto* g = self.parent_grad(1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i] * self.value[i] / bv[i];
    });
}

/// atan2(y, x) elementwise.
template <typename T>
Var<T> atan2(const Var<T>& y, const Var<T>& x) {
    detail::require_same(y.shape(), x.shape(), "atan2");
    Tensor<T> out(y.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::atan2(y.value()[i], x.value()[i]);
    return make_op(std::move(out), {y, x}, [](Node<T>& self) {
        const auto& yv = self.parent_value(0);
        const auto& xv = self.parent_value(1);
        auto* gy = self.parent_grad(0);
        auto* gx = self.parent_grad(1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T r2 = xv[i] * xv[i] + yv[i] * yv[i];
            if (r2 == T(0)) continue;
            if (gy) (*gy)[i] += self.grad[i] * xv[i] / r2;
            if (gx) (*gx)[i] -= self.grad[i] * yv[i] / r2;
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
    return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& x) { return scale(x, T(-1)); }

template <typename T>
Var<T> square(const Var<T>& x) {
    return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
    return detail::unary(
        x, [](T v) { return std::sqrt(v); }, [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
    return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> cos(const Var<T>& x) {
    return detail::unary(x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <typename T>
Var<T> sin(const Var<T>& x) {
    return detail::unary(x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
    return detail::unary(
        x, [slope](T v) { return v > T(0) ? v : slope * v; }, [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

/// log(1 + exp(x)), stable for large |x|.
template <typename T>
T softplus_value(T v) {
    return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
T sigmoid_value(T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
    return detail::unary(x, [](T v) { return softplus_value(v); }, [](T v, T) { return sigmoid_value(v); });
}

/// max(x, c). Gradient is zero wherever the floor is active (x <= c).
template <typename T>
Var<T> clamp_min(const Var<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v > c ? v : c; }, [c](T v, T) { return v > c ? T(1) : T(0); });
}

/// min(x, c). Gradient is zero wherever the ceiling is active (x >= c).
template <typename T>
Var<T> clamp_max(const Var<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v < c ? v : c; }, [c](T v, T) { return v < c ? T(1) : T(0); });
}

/// Margin kept away from +-1 when differentiating arccos.
inline constexpr double kAcosGradClip = 1e-7;

template <typename T>
T acos_value(T v) {
    return std::acos(std::clamp(v, T(-1), T(1)));
}

template <typename T>
T acos_grad(T v) {
    const T c = std::clamp(v, T(-1 + kAcosGradClip), T(1 - kAcosGradClip));
    return T(-1) / std::sqrt(T(1) - c * c);
}

/// arccos with the value taken on [-1, 1] and the derivative evaluated on
/// [-1 + 1e-7, 1 - 1e-7] so it stays finite at the endpoints.
template <typename T>
Var<T> acos_clipped(const Var<T>& x) {
    return detail::unary(x, [](T v) { return acos_value(v); }, [](T v, T) { return acos_grad(v); });
}

// ------------------------------------------------------------------- shaping

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
    detail::require(shape_numel(s) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(s));
    Tensor<T> y;
    y.shape = std::move(s);
    y.data = x.value().data;
    return make_op(std::move(y), {x}, [](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

/// Rows [begin, end) along the leading axis.
template <typename T>
Var<T> slice_rows(const Var<T>& x, int begin, int end) {
    detail::require(begin >= 0 && end <= x.dim(0) && begin < end, "slice_rows: bad range");
    const std::size_t stride = x.size() / static_cast<std::size_t>(x.dim(0));
    const std::size_t off = static_cast<std::size_t>(begin) * stride;
    return make_op(x.value().rows(begin, end), {x}, [off](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[off + i] += self.grad[i];
    });
}

template <typename T>
Var<T> cat_rows(const std::vector<Var<T>>& parts) {
    std::vector<Tensor<T>> vals;
    vals.reserve(parts.size());
    for (const auto& p : parts) vals.push_back(p.value());
    return make_op(synthid::cat_rows(vals), parts, [](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            const std::size_t n = self.parents[p]->value.size();
            if (auto* g = self.parent_grad(p))
                for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[off + i];
            off += n;
        }
    });
}

/// [N,P] ++ [N,Q] -> [N,P+Q]
template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(0) == b.dim(0),
                    "concat_cols: expected [N,P] and [N,Q], got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    const int n = a.dim(0), p = a.dim(1), q = b.dim(1);
    Tensor<T> y({n, p + q});
    for (int r = 0; r < n; ++r) {
        std::copy_n(a.value().ptr() + r * p, p, y.ptr() + r * (p + q));
        std::copy_n(b.value().ptr() + r * q, q, y.ptr() + r * (p + q) + p);
    }
    return make_op(std::move(y), {a, b}, [n, p, q](Node<T>& self) {
        auto* ga = self.parent_grad(0);
        auto* gb = self.parent_grad(1);
        for (int r = 0; r < n; ++r) {
            for (int j = 0; j < p; ++j)
                if (ga) (*ga)[r * p + j] += self.grad[r * (p + q) + j];
            for (int j = 0; j < q; ++j)
                if (gb) (*gb)[r * q + j] += self.grad[r * (p + q) + p + j];
        }
    });
}

/// Append the mean per-feature stddev over row groups of `group` as an extra column: [N,F] -> [N,F+1].
/// Falls back to one group when N is not a multiple of `group`.
template <typename T>
Var<T> minibatch_stddev(const Var<T>& x, int group = 4) {
    detail::require(x.shape().size() == 2, "minibatch_stddev: expected [N,F], got " + shape_str(x.shape()));
    const int n = x.dim(0), f = x.dim(1);
    const int gs = (group > 0 && n % group == 0) ? group : n;
    const int groups = n / gs;
    Tensor<T> y({n, f + 1});
    std::vector<double> mu(static_cast<std::size_t>(groups) * f), sd(mu.size());
    for (int g = 0; g < groups; ++g) {
        double acc = 0;
        for (int j = 0; j < f; ++j) {
            double m = 0, v = 0;
            for (int r = g * gs; r < (g + 1) * gs; ++r) m += x.value()[r * f + j];
            m /= gs;
            for (int r = g * gs; r < (g + 1) * gs; ++r) {
                const double d = x.value()[r * f + j] - m;
                v += d * d;
            }
            mu[g * f + j] = m;
            sd[g * f + j] = std::sqrt(v / gs + 1e-8);
            acc += sd[g * f + j];
        }
        for (int r = g * gs; r < (g + 1) * gs; ++r) {
            std::copy_n(x.value().ptr() + r * f, f, y.ptr() + r * (f + 1));
            y[r * (f + 1) + f] = static_cast<T>(acc / f);
        }
    }
    return make_op(std::move(y), {x}, [n, f, gs, groups, mu = std::move(mu), sd = std::move(sd)](Node<T>& self) {
        auto* g = self.parent_grad(0);
        if (!g) return;
        const T* xv = self.parent_value(0).ptr();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < f; ++j) (*g)[r * f + j] += self.grad[r * (f + 1) + j];
        for (int q = 0; q < groups; ++q) {
            double ds = 0;
            for (int r = q * gs; r < (q + 1) * gs; ++r) ds += self.grad[r * (f + 1) + f];
            for (int j = 0; j < f; ++j) {
                const double k = ds / (static_cast<double>(gs) * f * sd[q * f + j]);
                for (int r = q * gs; r < (q + 1) * gs; ++r)
                    (*g)[r * f + j] += static_cast<T>(k * (xv[r * f + j] - mu[q * f + j]));
            }
        }
    });
}

/// Column j of [N,J] -> [N].
template <typename T>
Var<T> column(const Var<T>& x, int j) {
    const int n = x.dim(0), m = x.dim(1);
    Tensor<T> y({n});
    for (int r = 0; r < n; ++r) y[r] = x.value()[r * m + j];
    return make_op(std::move(y), {x}, [n, m, j](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (int r = 0; r < n; ++r) (*g)[r * m + j] += self.grad[r];
    });
}

/// Stack J vectors of shape [N] into [N,J].
template <typename T>
Var<T> stack_cols(const std::vector<Var<T>>& cols) {
    const int n = cols.front().dim(0), m = static_cast<int>(cols.size());
    Tensor<T> y({n, m});
    for (int j = 0; j < m; ++j) {
        detail::require(cols[j].shape() == Shape{n}, "stack_cols: column shape mismatch");
        for (int r = 0; r < n; ++r) y[r * m + j] = cols[j].value()[r];
    }
    return make_op(std::move(y), cols, [n, m](Node<T>& self) {
        for (int j = 0; j < m; ++j)
            if (auto* g = self.parent_grad(j))
                for (int r = 0; r < n; ++r) (*g)[r] += self.grad[r * m + j];
    });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
    T acc = T(0);
    for (T v : x.value().data) acc += v;
    return make_op(Tensor<T>({1}, acc), {x}, [](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (auto& v : g->data) v += self.grad[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Sum over the last axis of [N,K] -> [N].
template <typename T>
Var<T> sum_cols(const Var<T>& x) {
    const int n = x.dim(0);
    const int k = static_cast<int>(x.size() / static_cast<std::size_t>(n));
    Tensor<T> y({n});
    for (int r = 0; r < n; ++r) {
        T acc = T(0);
        for (int j = 0; j < k; ++j) acc += x.value()[r * k + j];
        y[r] = acc;
    }
    return make_op(std::move(y), {x}, [n, k](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < k; ++j) (*g)[r * k + j] += self.grad[r];
    });
}

/// View x as [A,B,C] and sum over B -> [A,C].
template <typename T>
Var<T> sum_middle(const Var<T>& x, int a, int b, int c) {
    detail::require(static_cast<std::size_t>(a) * b * c == x.size(), "sum_middle: size mismatch");
    Tensor<T> y({a, c});
    for (int i = 0; i < a; ++i)
        for (int j = 0; j < b; ++j)
            for (int k = 0; k < c; ++k) y[i * c + k] += x.value()[(i * b + j) * c + k];
    return make_op(std::move(y), {x}, [a, b, c](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (int i = 0; i < a; ++i)
                for (int j = 0; j < b; ++j)
                    for (int k = 0; k < c; ++k) (*g)[(i * b + j) * c + k] += self.grad[i * c + k];
    });
}

/// Channel c of x viewed as [N,C,K] -> [N,K].
template <typename T>
Var<T> channel(const Var<T>& x, int c, int channels) {
    const int n = x.dim(0);
    const std::size_t k = x.size() / (static_cast<std::size_t>(n) * channels);
    Tensor<T> y({n, static_cast<int>(k)});
    for (int i = 0; i < n; ++i)
        std::copy_n(x.value().ptr() + (static_cast<std::size_t>(i) * channels + c) * k, k, y.ptr() + i * k);
    return make_op(std::move(y), {x}, [n, c, channels, k](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (int i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) (*g)[(static_cast<std::size_t>(i) * channels + c) * k + j] += self.grad[i * k + j];
    });
}

// ---------------------------------------------------------------- broadcasts

/// [N,K] (op) [N] applied per row.
template <typename T>
Var<T> sub_colvec(const Var<T>& x, const Var<T>& c) {
    const int n = x.dim(0);
    const int k = static_cast<int>(x.size() / static_cast<std::size_t>(n));
    detail::require(c.size() == static_cast<std::size_t>(n), "sub_colvec: length mismatch");
    Tensor<T> y(x.shape());
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < k; ++j) y[r * k + j] = x.value()[r * k + j] - c.value()[r];
    return make_op(std::move(y), {x, c}, [n, k](Node<T>& self) {
        auto* gx = self.parent_grad(0);
        auto* gc = self.parent_grad(1);
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < k; ++j) {
                const T g = self.grad[r * k + j];
                if (gx) (*gx)[r * k + j] += g;
                if (gc) (*gc)[r] -= g;
            }
    });
}

template <typename T>
Var<T> mul_colvec(const Var<T>& x, const Var<T>& c) {
    const int n = x.dim(0);
    const int k = static_cast<int>(x.size() / static_cast<std::size_t>(n));
    detail::require(c.size() == static_cast<std::size_t>(n), "mul_colvec: length mismatch");
    Tensor<T> y(x.shape());
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < k; ++j) y[r * k + j] = x.value()[r * k + j] * c.value()[r];
    return make_op(std::move(y), {x, c}, [n, k](Node<T>& self) {
        const auto& xv = self.parent_value(0);
        const auto& cv = self.parent_value(1);
        auto* gx = self.parent_grad(0);
        auto* gc = self.parent_grad(1);
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < k; ++j) {
                const T g = self.grad[r * k + j];
                if (gx) (*gx)[r * k + j] += g * cv[r];
                if (gc) (*gc)[r] += g * xv[r * k + j];
            }
    });
}

/// [N,K] * v[K] broadcast over rows.
template <typename T>
Var<T> mul_rowvec(const Var<T>& x, const Var<T>& v) {
    const std::size_t k = v.size();
    detail::require(k > 0 && x.size() % k == 0, "mul_rowvec: length mismatch");
    const std::size_t n = x.size() / k;
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j) y[r * k + j] = x.value()[r * k + j] * v.value()[j];
    return make_op(std::move(y), {x, v}, [n, k](Node<T>& self) {
        const auto& xv = self.parent_value(0);
        const auto& vv = self.parent_value(1);
        auto* gx = self.parent_grad(0);
        auto* gv = self.parent_grad(1);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < k; ++j) {
                const T g = self.grad[r * k + j];
                if (gx) (*gx)[r * k + j] += g * vv[j];
                if (gv) (*gv)[j] += g * xv[r * k + j];
            }
    });
}

// ------------------------------------------------------------- dense algebra

/// y = scale * x W^T + b, x:[N,I], W:[O,I], b:[O] (optional).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b, T scale = T(1)) {
    detail::require(x.shape().size() == 2 && w.shape().size() == 2 && x.dim(1) == w.dim(1),
                    "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    Tensor<T> y({n, out});
    MapR<T> ym(y.ptr(), n, out);
    ym.noalias() = scale * (CMapR<T>(x.value().ptr(), n, in) * CMapR<T>(w.value().ptr(), out, in).transpose());
    if (b.defined()) ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().ptr(), out);
    return make_op(std::move(y), {x, w, b}, [n, in, out, scale](Node<T>& self) {
        CMapR<T> gy(self.grad.ptr(), n, out);
        if (auto* gx = self.parent_grad(0))
            MapR<T>(gx->ptr(), n, in).noalias() += scale * (gy * CMapR<T>(self.parent_value(1).ptr(), out, in));
        if (auto* gw = self.parent_grad(1))
            MapR<T>(gw->ptr(), out, in).noalias() +=
                scale * (gy.transpose() * CMapR<T>(self.parent_value(0).ptr(), n, in));
        if (self.parents.size() > 2 && self.parents[2])
            if (auto* gb = self.parent_grad(2))
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->ptr(), out) += gy.colwise().sum();
    });
}

/// a b^T for a:[N,K], b:[M,K] -> [N,M].
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    return linear(a, b, Var<T>{}, T(1));
}

/// Row-wise inner product of [N,D] and [N,D] -> [N].
template <typename T>
Var<T> rowdot(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a.shape(), b.shape(), "rowdot");
    return sum_cols(mul(a, b));
}

/// Each row scaled to unit L2 norm.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
    const int n = x.dim(0);
    const int d = static_cast<int>(x.size() / static_cast<std::size_t>(n));
    Tensor<T> y(x.shape());
    std::vector<T> norms(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        T ss = T(0);
        for (int j = 0; j < d; ++j) ss += x.value()[r * d + j] * x.value()[r * d + j];
        norms[r] = std::sqrt(ss + eps);
        for (int j = 0; j < d; ++j) y[r * d + j] = x.value()[r * d + j] / norms[r];
    }
    return make_op(std::move(y), {x}, [n, d, norms](Node<T>& self) {
        auto* gx = self.parent_grad(0);
        if (!gx) return;
        for (int r = 0; r < n; ++r) {
            T dot = T(0);
            for (int j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.value[r * d + j];
            for (int j = 0; j < d; ++j)
                (*gx)[r * d + j] += (self.grad[r * d + j] - self.value[r * d + j] * dot) / norms[r];
        }
    });
}

// -------------------------------------------------------------- convolutions

namespace detail {

struct ConvGeom {
    int c, h, w, k, stride, pad, ho, wo;
    int rows() const { return c * k * k; }
    int cols() const { return ho * wo; }
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* out) {
    for (int ci = 0; ci < g.c; ++ci)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = out + static_cast<std::ptrdiff_t>(((ci * g.k + ky) * g.k + kx)) * g.cols();
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        row[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                                  ? img[(ci * g.h + iy) * g.w + ix]
                                                  : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
    for (int ci = 0; ci < g.c; ++ci)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = cols + static_cast<std::ptrdiff_t>(((ci * g.k + ky) * g.k + kx)) * g.cols();
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) img[(ci * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
                    }
                }
            }
}

} // namespace detail

/// 2-D convolution, x:[N,C,H,W], w:[O,C,K,K], b:[O] (optional).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad, T scale = T(1)) {
    detail::require(x.shape().size() == 4 && w.shape().size() == 4 && x.dim(1) == w.dim(1) && w.dim(2) == w.dim(3),
                    "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const int n = x.dim(0), out_c = w.dim(0);
    detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    const std::size_t col_sz = static_cast<std::size_t>(g.rows()) * g.cols();
    const std::size_t in_sz = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_sz = static_cast<std::size_t>(out_c) * g.cols();

    auto cols = std::make_shared<Buffer<T>>(col_sz * n);
    Tensor<T> y({n, out_c, g.ho, g.wo});
    CMapR<T> wm(w.value().ptr(), out_c, g.rows());
    for (int i = 0; i < n; ++i) {
        T* ci = cols->data() + col_sz * i;
        detail::im2col(x.value().ptr() + in_sz * i, g, ci);
        MapR<T> yi(y.ptr() + out_sz * i, out_c, g.cols());
        yi.noalias() = scale * (wm * CMapR<T>(ci, g.rows(), g.cols()));
        if (b.defined())
            yi.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.value().ptr(), out_c);
    }
    const bool keep_cols = w.requires_grad();
    if (!keep_cols) cols.reset();
    return make_op(std::move(y), {x, w, b}, [n, out_c, g, col_sz, in_sz, out_sz, scale, cols](Node<T>& self) {
        CMapR<T> wm(self.parent_value(1).ptr(), out_c, g.rows());
        auto* gx = self.parent_grad(0);
        auto* gw = self.parent_grad(1);
        auto* gb = (self.parents.size() > 2 && self.parents[2]) ? self.parent_grad(2) : nullptr;
        MatR<T> dcols;
        for (int i = 0; i < n; ++i) {
            CMapR<T> gy(self.grad.ptr() + out_sz * i, out_c, g.cols());
            if (gw) {
                MapR<T>(gw->ptr(), out_c, g.rows()).noalias() +=
                    scale * (gy * CMapR<T>(cols->data() + col_sz * i, g.rows(), g.cols()).transpose());
            }
            if (gb) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->ptr(), out_c) += gy.rowwise().sum();
            if (gx) {
                dcols.noalias() = scale * (wm.transpose() * gy);
                detail::col2im_add(dcols.data(), g, gx->ptr() + in_sz * i);
            }
        }
    });
}

/// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (int p = 0; p < nc; ++p)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
                y[(static_cast<std::size_t>(p) * 2 * h + i) * 2 * w + j] =
                    x.value()[(static_cast<std::size_t>(p) * h + i / 2) * w + j / 2];
    return make_op(std::move(y), {x}, [nc, h, w](Node<T>& self) {
        if (auto* g = self.parent_grad(0))
            for (int p = 0; p < nc; ++p)
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        (*g)[(static_cast<std::size_t>(p) * h + i / 2) * w + j / 2] +=
                            self.grad[(static_cast<std::size_t>(p) * 2 * h + i) * 2 * w + j];
    });
}

/// Per-sample, per-channel affine modulation: y * (1 + gamma) + beta,
/// y:[N,C,H,W], gamma/beta:[N,C].
template <typename T>
Var<T> modulate(const Var<T>& y, const Var<T>& gamma, const Var<T>& beta) {
    const int n = y.dim(0), c = y.dim(1);
    const int hw = static_cast<int>(y.size() / (static_cast<std::size_t>(n) * c));
    detail::require(gamma.shape() == Shape{n, c} && beta.shape() == Shape{n, c}, "modulate: style shape mismatch");
    Tensor<T> out(y.shape());
    for (int i = 0; i < n * c; ++i) {
        const T a = T(1) + gamma.value()[i], s = beta.value()[i];
        for (int k = 0; k < hw; ++k) out[static_cast<std::size_t>(i) * hw + k] = y.value()[static_cast<std::size_t>(i) * hw + k] * a + s;
    }
    return make_op(std::move(out), {y, gamma, beta}, [n, c, hw](Node<T>& self) {
        const auto& yv = self.parent_value(0);
        const auto& gv = self.parent_value(1);
        auto* gy = self.parent_grad(0);
        auto* gg = self.parent_grad(1);
        auto* gbeta = self.parent_grad(2);
        for (int i = 0; i < n * c; ++i) {
            const T a = T(1) + gv[i];
            T sg = T(0), sb = T(0);
            for (int k = 0; k < hw; ++k) {
                const std::size_t idx = static_cast<std::size_t>(i) * hw + k;
                const T g = self.grad[idx];
                if (gy) (*gy)[idx] += g * a;
                sg += g * yv[idx];
                sb += g;
            }
            if (gg) (*gg)[i] += sg;
            if (gbeta) (*gbeta)[i] += sb;
        }
    });
}

/// y + strength[c] * noise[n, h, w] for y:[N,C,H,W]; noise is a constant.
template <typename T>
Var<T> add_noise(const Var<T>& y, const Var<T>& strength, const Tensor<T>& noise) {
    const int n = y.dim(0), c = y.dim(1);
    const int hw = static_cast<int>(y.size() / (static_cast<std::size_t>(n) * c));
    detail::require(noise.size() == static_cast<std::size_t>(n) * hw && strength.size() == static_cast<std::size_t>(c),
                    "add_noise: shape mismatch");
    Tensor<T> out(y.shape());
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int k = 0; k < hw; ++k) {
                const std::size_t idx = (static_cast<std::size_t>(i) * c + ch) * hw + k;
                out[idx] = y.value()[idx] + strength.value()[ch] * noise[static_cast<std::size_t>(i) * hw + k];
            }
    return make_op(std::move(out), {y, strength}, [n, c, hw, noise](Node<T>& self) {
        auto* gy = self.parent_grad(0);
        auto* gs = self.parent_grad(1);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int k = 0; k < hw; ++k) {
                    const std::size_t idx = (static_cast<std::size_t>(i) * c + ch) * hw + k;
                    if (gy) (*gy)[idx] += self.grad[idx];
                    if (gs) (*gs)[ch] += self.grad[idx] * noise[static_cast<std::size_t>(i) * hw + k];
                }
    });
}

// -------------------------------------------------------- classification heads

/// Scaled cosine logits with an additive angular margin on the labelled
/// class: s*cos(theta_j), and s*cos(theta_y + m) for j == y.
/// cosines:[N,K] holds e_i . w_j for unit rows.
template <typename T>
Var<T> margin_logits(const Var<T>& cosines, std::span<const int> labels, T s, T m) {
    const int n = cosines.dim(0), k = cosines.dim(1);
    detail::require(labels.size() == static_cast<std::size_t>(n), "margin_logits: label count mismatch");
    Tensor<T> y(cosines.shape());
    std::vector<int> lab(labels.begin(), labels.end());
    for (int i = 0; i < n; ++i) {
        if (lab[i] < 0 || lab[i] >= k) throw ArgumentError("margin_logits: label out of range");
        for (int j = 0; j < k; ++j) {
            const T c = cosines.value()[i * k + j];
            y[i * k + j] = (j == lab[i]) ? s * std::cos(acos_value(c) + m) : s * std::clamp(c, T(-1), T(1));
        }
    }
    return make_op(std::move(y), {cosines}, [n, k, s, m, lab](Node<T>& self) {
        auto* g = self.parent_grad(0);
        if (!g) return;
        const auto& cv = self.parent_value(0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) {
                const T c = cv[i * k + j];
                T d = s;
                // d/dc cos(acos(c) + m) = -sin(acos(c) + m) * dacos/dc
                if (j == lab[i]) d = -s * std::sin(acos_value(c) + m) * acos_grad(c);
                (*g)[i * k + j] += self.grad[i * k + j] * d;
            }
    });
}

/// Mean softmax cross-entropy of logits:[N,K] against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const int n = logits.dim(0), k = logits.dim(1);
    detail::require(labels.size() == static_cast<std::size_t>(n), "cross_entropy: label count mismatch");
    std::vector<int> lab(labels.begin(), labels.end());
    Tensor<T> probs(logits.shape());
    T loss = T(0);
    for (int i = 0; i < n; ++i) {
        if (lab[i] < 0 || lab[i] >= k) throw ArgumentError("cross_entropy: label out of range");
        const T* row = logits.value().ptr() + static_cast<std::ptrdiff_t>(i) * k;
        const T mx = *std::max_element(row, row + k);
        T z = T(0);
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const T lse = mx + std::log(z);
        for (int j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
        loss += lse - row[lab[i]];
    }
    loss /= static_cast<T>(n);
    return make_op(Tensor<T>({1}, loss), {logits}, [n, k, lab, probs](Node<T>& self) {
        if (auto* g = self.parent_grad(0)) {
            const T scale = self.grad[0] / static_cast<T>(n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j)
                    (*g)[i * k + j] += scale * (probs[i * k + j] - (j == lab[i] ? T(1) : T(0)));
        }
    });
}

} // namespace synthid::ag
