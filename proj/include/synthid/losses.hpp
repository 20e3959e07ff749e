#pragma once

// GAN objective, the four clamped disentanglement losses, and R1.
//
// Auxiliary losses per triplet (I0 anchor, I+ same identity, I- same pose):
//   l_pull  =  max(theta_same, tau_pull)     theta_same = angle(F(I0), F(I+))
//   l_push  = -min(theta_diff, tau_push)     theta_diff = angle(F(I0), F(I-))
//   l_vary  = -min(d_vary, tau_vary)         d_vary  = |P(I0) - P(I+)|^2
//   l_match =  min(d_match, tau_match)       d_match = |P(I0) - P(I-)|^2
// Batched forms clamp per triplet, then average.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/nn.hpp"
#include "synthid/types.hpp"

namespace synthid {

using ag::Var;

enum class GanObjective { NonSaturating, Minimax };

inline GanObjective parse_gan_objective(const std::string& s) {
    if (s == "non-saturating") return GanObjective::NonSaturating;
    if (s == "minimax") return GanObjective::Minimax;
    throw ConfigError("unknown GAN objective '" + s + "' (known: non-saturating, minimax)");
}
inline std::string to_string(GanObjective o) { return o == GanObjective::Minimax ? "minimax" : "non-saturating"; }

struct LossConfig {
    double lambda_aux = 0.1;
    double tau_pull = 0.70;   // rad
    double tau_push = 1.40;   // rad
    double tau_vary = 3.0;    // squared pose units
    double tau_match = 5.0;   // squared pose units
    GanObjective objective = GanObjective::NonSaturating;
    bool r1 = true;
    double r1_gamma = 1.0;
    int r1_interval = 16;

    void validate() const {
        if (!(lambda_aux >= 0.0)) throw ConfigError("lambda_aux must be non-negative");
        if (!(tau_pull > 0 && tau_push > 0 && tau_vary > 0 && tau_match > 0))
            throw ConfigError("loss thresholds must be positive");
        if (!(tau_pull < tau_push)) throw ConfigError("tau_pull must be below tau_push");
        if (!(r1_gamma >= 0.0) || r1_interval < 1) throw ConfigError("R1 needs gamma >= 0 and interval >= 1");
    }

    nlohmann::ordered_json to_json() const {
        return {{"lambda_aux", lambda_aux}, {"tau_pull", tau_pull},     {"tau_push", tau_push},
                {"tau_vary", tau_vary},     {"tau_match", tau_match},   {"objective", to_string(objective)},
                {"r1", r1},                 {"r1_gamma", r1_gamma},     {"r1_interval", r1_interval}};
    }
};

struct AuxLossReport {
    double l_pull = 0, l_push = 0, l_vary = 0, l_match = 0;
    double theta_same = 0, theta_diff = 0;
    double d_vary = 0, d_match = 0;
    double total_aux = 0;

    nlohmann::ordered_json to_json() const {
        return {{"l_pull", l_pull},   {"l_push", l_push},   {"l_vary", l_vary},
                {"l_match", l_match}, {"theta_same", theta_same}, {"theta_diff", theta_diff},
                {"d_vary", d_vary},   {"d_match", d_match}, {"total_aux", total_aux}};
    }
};

// ------------------------------------------------------------- plain values

struct GanLossValues {
    double d_loss = 0, g_loss = 0;
};

inline GanLossValues gan_losses(std::span<const double> real, std::span<const double> fake,
                                GanObjective objective = GanObjective::NonSaturating) {
    if (real.empty() || fake.empty()) throw ArgumentError("gan_losses: empty score batch");
    double dr = 0, df = 0, g = 0;
    for (double r : real) dr += ag::softplus_value(-r);
    for (double f : fake) {
        df += ag::softplus_value(f);
        g += objective == GanObjective::Minimax ? -ag::softplus_value(f) : ag::softplus_value(-f);
    }
    const double nr = static_cast<double>(real.size()), nf = static_cast<double>(fake.size());
    return {dr / nr + df / nf, g / nf};
}

struct IdentityLossValues {
    double l_pull = 0, l_push = 0, theta_same = 0, theta_diff = 0;
};

namespace detail {
inline void require_unit(std::span<const double> e, const char* what) {
    double s = 0;
    for (double v : e) s += v * v;
    if (!(std::abs(std::sqrt(s) - 1.0) <= 1e-3)) throw ArgumentError(std::string(what) + " is not unit-norm");
}
inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ArgumentError("embedding dimensions differ");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}
} // namespace detail

inline IdentityLossValues identity_losses(std::span<const double> e0, std::span<const double> e_plus,
                                          std::span<const double> e_minus, const LossConfig& cfg) {
    detail::require_unit(e0, "e0");
    detail::require_unit(e_plus, "e_plus");
    detail::require_unit(e_minus, "e_minus");
    IdentityLossValues v;
    v.theta_same = ag::acos_value(detail::dot(e0, e_plus));
    v.theta_diff = ag::acos_value(detail::dot(e0, e_minus));
    v.l_pull = std::max(v.theta_same, cfg.tau_pull);
    v.l_push = -std::min(v.theta_diff, cfg.tau_push);
    return v;
}

struct PoseLossValues {
    double l_vary = 0, l_match = 0, d_vary = 0, d_match = 0;
};

inline PoseLossValues pose_losses(const PoseVector& p0, const PoseVector& p_plus, const PoseVector& p_minus,
                                  const LossConfig& cfg) {
    PoseLossValues v;
    v.d_vary = pose_sq_distance(p0, p_plus);
    v.d_match = pose_sq_distance(p0, p_minus);
    v.l_vary = -std::min(v.d_vary, cfg.tau_vary);
    v.l_match = std::min(v.d_match, cfg.tau_match);
    return v;
}

inline double total_generator_loss(double g_loss, const AuxLossReport& aux, const LossConfig& cfg) {
    return g_loss + cfg.lambda_aux * (aux.l_pull + aux.l_push + aux.l_vary + aux.l_match);
}

// --------------------------------------------------------- differentiable

template <typename T>
Var<T> discriminator_loss(const Var<T>& real, const Var<T>& fake) {
    if (real.size() == 0 || fake.size() == 0) throw ArgumentError("discriminator_loss: empty score batch");
    return ag::add(ag::mean(ag::softplus(ag::neg(real))), ag::mean(ag::softplus(fake)));
}

template <typename T>
Var<T> generator_loss(const Var<T>& fake, GanObjective objective) {
    if (fake.size() == 0) throw ArgumentError("generator_loss: empty score batch");
    if (objective == GanObjective::Minimax) return ag::neg(ag::mean(ag::softplus(fake)));
    return ag::mean(ag::softplus(ag::neg(fake)));
}

template <typename T>
struct AuxLosses {
    Var<T> l_pull, l_push, l_vary, l_match;
    Var<T> total;  // lambda_aux * sum of the four
    AuxLossReport report;
};

/// Batched auxiliary losses. Embeddings are unit rows [B,d]; poses [B,3].
template <typename T>
AuxLosses<T> aux_losses(const Var<T>& e0, const Var<T>& e_plus, const Var<T>& e_minus, const Var<T>& p0,
                        const Var<T>& p_plus, const Var<T>& p_minus, const LossConfig& cfg) {
    const int n = e0.dim(0);
    if (e_plus.shape() != e0.shape() || e_minus.shape() != e0.shape())
        throw ArgumentError("aux_losses: embedding batch shapes differ");
    if (p0.shape() != Shape{n, 3} || p_plus.shape() != p0.shape() || p_minus.shape() != p0.shape())
        throw ArgumentError("aux_losses: pose batches must be [B,3]");
    const int d = e0.dim(1);
    for (const auto* e : {&e0, &e_plus, &e_minus})
        for (int i = 0; i < n; ++i) {
            const auto* row = e->value().ptr() + static_cast<std::size_t>(i) * d;
            std::vector<double> r(row, row + d);
            detail::require_unit(r, "embedding row");
        }

    AuxLosses<T> out;
    const auto theta_same = ag::acos_clipped(ag::rowdot(e0, e_plus));
    const auto theta_diff = ag::acos_clipped(ag::rowdot(e0, e_minus));
    const auto d_vary = ag::sum_cols(ag::square(ag::sub(p0, p_plus)));
    const auto d_match = ag::sum_cols(ag::square(ag::sub(p0, p_minus)));
    out.l_pull = ag::mean(ag::clamp_min(theta_same, static_cast<T>(cfg.tau_pull)));
    out.l_push = ag::neg(ag::mean(ag::clamp_max(theta_diff, static_cast<T>(cfg.tau_push))));
    out.l_vary = ag::neg(ag::mean(ag::clamp_max(d_vary, static_cast<T>(cfg.tau_vary))));
    out.l_match = ag::mean(ag::clamp_max(d_match, static_cast<T>(cfg.tau_match)));
    out.total = ag::scale(ag::add(ag::add(out.l_pull, out.l_push), ag::add(out.l_vary, out.l_match)),
                          static_cast<T>(cfg.lambda_aux));

    auto avg = [](const Var<T>& v) {
        double s = 0;
        for (T x : v.value().data) s += x;
        return s / static_cast<double>(v.size());
    };
    auto& r = out.report;
    r.l_pull = out.l_pull.item();
    r.l_push = out.l_push.item();
    r.l_vary = out.l_vary.item();
    r.l_match = out.l_match.item();
    r.theta_same = avg(theta_same);
    r.theta_diff = avg(theta_diff);
    r.d_vary = avg(d_vary);
    r.d_match = avg(d_match);
    r.total_aux = cfg.lambda_aux * (r.l_pull + r.l_push + r.l_vary + r.l_match);
    return out;
}

// ----------------------------------------------------------------------- R1

/// Adds weight * grad_theta of the R1 penalty (gamma/2) * mean_i |grad_x D(x_i)|^2
/// to the parameter gradients and returns the penalty value.
///
/// The parameter gradient is a mixed second derivative, computed as a central
/// difference of grad_theta D along g = grad_x D:
///   grad_theta (1/2)|g|^2 = (grad_theta D(x + h g) - grad_theta D(x - h g)) / 2h.
/// h is chosen so the perturbation has root-mean-square `step` per input element.
template <typename T>
double r1_penalty(const std::function<Var<T>(const Var<T>&)>& disc, const Tensor<T>& real,
                  std::vector<Var<T>>& params, double gamma, double weight, double step = 1e-2) {
    const int n = real.dim(0);
    std::vector<Tensor<T>> stash;
    for (auto& p : params) {
        stash.push_back(p.grad());
        p.zero_grad();
    }
    auto x = Var<T>::leaf(real, true);
    ag::backward(ag::sum(disc(x)));
    const Tensor<T> g = x.grad();
    const double g2 = sum_squares(g);
    const double penalty = 0.5 * gamma * g2 / n;

    std::vector<Tensor<T>> plus;
    if (g2 > 0.0) {
        const double h = step / std::sqrt(g2 / static_cast<double>(g.size()));
        auto grads_at = [&](double sign) {
            for (auto& p : params) p.zero_grad();
            Tensor<T> xs = real;
            for (std::size_t k = 0; k < xs.size(); ++k) xs[k] = static_cast<T>(xs[k] + sign * h * g[k]);
            ag::backward(ag::sum(disc(Var<T>::constant(std::move(xs)))));
            std::vector<Tensor<T>> out;
            for (auto& p : params) out.push_back(p.grad());
            return out;
        };
        plus = grads_at(+1.0);
        const auto minus = grads_at(-1.0);
        const double coef = weight * gamma / n / (2.0 * h);
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t k = 0; k < stash[i].size(); ++k)
                stash[i][k] = static_cast<T>(stash[i][k] + coef * (static_cast<double>(plus[i][k]) - minus[i][k]));
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].grad() = std::move(stash[i]);
    return penalty;
}

} // namespace synthid
