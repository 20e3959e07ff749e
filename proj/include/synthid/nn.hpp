#pragma once

// Parameter containers, equalized-learning-rate layers and Adam.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "synthid/ops.hpp"
#include "synthid/rng.hpp"

namespace synthid::nn {

using ag::Var;

/// Ordered, named set of trainable tensors belonging to one submodule.
template <typename T>
class ParamSet {
public:
    Var<T>& add(const std::string& name, Tensor<T> init) {
        for (const auto& [n, _] : params_)
            if (n == name) throw ConfigError("duplicate parameter name: " + name);
        params_.emplace_back(name, Var<T>::leaf(std::move(init), trainable_));
        return params_.back().second;
    }

    std::vector<std::pair<std::string, Var<T>>>& items() noexcept { return params_; }
    const std::vector<std::pair<std::string, Var<T>>>& items() const noexcept { return params_; }

    std::vector<Var<T>> vars() const {
        std::vector<Var<T>> out;
        out.reserve(params_.size());
        for (const auto& [_, v] : params_) out.push_back(v);
        return out;
    }

    Var<T>& at(const std::string& name) {
        for (auto& [n, v] : params_)
            if (n == name) return v;
        throw ConfigError("unknown parameter: " + name);
    }

    void zero_grad() {
        for (auto& [_, v] : params_) v.zero_grad();
    }

    /// Frozen parameters still pass gradients through to their inputs.
    void set_trainable(bool on) {
        trainable_ = on;
        for (auto& [_, v] : params_) v.set_requires_grad(on);
    }
    bool trainable() const noexcept { return trainable_; }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params_) n += v.size();
        return n;
    }

    /// Order-sensitive checksum of all parameter values.
    double checksum() const {
        double acc = 0.0, k = 1.0;
        for (const auto& [_, v] : params_)
            for (T x : v.value().data) {
                acc += k * static_cast<double>(x);
                k = k * 1.000001 + 1e-3;
            }
        return acc;
    }

    std::map<std::string, Tensor<T>> snapshot() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [n, v] : params_) out.emplace(n, v.value());
        return out;
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    bool trainable_ = true;
};

/// Weights are stored N(0,1) and scaled by gain/sqrt(fan_in) at runtime,
/// so one learning rate suits every layer.
template <typename T>
struct Linear {
    Var<T> weight, bias;
    T scale = T(1);

    Linear() = default;
    Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng, T gain = T(1), T bias_init = T(0)) {
        Tensor<T> w({out, in});
        for (auto& v : w.data) v = static_cast<T>(rng.normal());
        weight = ps.add(name + ".weight", std::move(w));
        bias = ps.add(name + ".bias", Tensor<T>({out}, bias_init));
        scale = gain / std::sqrt(static_cast<T>(in));
    }

    int in_features() const { return weight.dim(1); }
    int out_features() const { return weight.dim(0); }

    Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias, scale); }
};

template <typename T>
struct Conv2d {
    Var<T> weight, bias;
    T scale = T(1);
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamSet<T>& ps, const std::string& name, int in, int out, int kernel, int stride_, int pad_, Rng& rng,
           T gain = T(1))
        : stride(stride_), pad(pad_) {
        Tensor<T> w({out, in, kernel, kernel});
        for (auto& v : w.data) v = static_cast<T>(rng.normal());
        weight = ps.add(name + ".weight", std::move(w));
        bias = ps.add(name + ".bias", Tensor<T>({out}));
        scale = gain / std::sqrt(static_cast<T>(in * kernel * kernel));
    }

    Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, bias, stride, pad, scale); }
};

inline constexpr float kLeakySlope = 0.2f;
/// Gain that keeps activation variance under leaky ReLU.
inline const float kLeakyGain = std::sqrt(2.0f / (1.0f + kLeakySlope * kLeakySlope));

struct AdamOptions {
    double lr = 2e-3;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double.
template <typename T>
class Adam {
public:
    Adam(std::vector<Var<T>> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto& g = p.grad();
            auto& w = p.mutable_value();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = g[k];
                m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
                v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
                const double mh = m[k] / c1;
                const double vh = v[k] / c2;
                w[k] = static_cast<T>(w[k] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const noexcept { return t_; }
    const AdamOptions& options() const noexcept { return opt_; }

    /// Moment buffers, first and second, in parameter order.
    std::vector<Tensor<double>>& first_moments() noexcept { return m_; }
    std::vector<Tensor<double>>& second_moments() noexcept { return v_; }
    void set_steps(long t) noexcept { t_ = t; }

private:
    std::vector<Var<T>> params_;
    AdamOptions opt_;
    std::vector<Tensor<double>> m_, v_;
    long t_ = 0;
};

/// Euclidean norm of all gradients in a set.
template <typename T>
double grad_norm(ParamSet<T>& ps) {
    double acc = 0.0;
    for (auto& [_, v] : ps.items()) acc += sum_squares(v.grad());
    return std::sqrt(acc);
}

} // namespace synthid::nn
