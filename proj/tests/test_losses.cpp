#include <gtest/gtest.h>

#include <numbers>

#include "support/gradcheck.hpp"
#include "synthid/gan_core.hpp"
#include "synthid/losses.hpp"

using namespace synthid;
namespace ag = synthid::ag;

namespace {

// Unit vector at angle theta from e_x in the (x, y) plane of R^d.
std::vector<double> at_angle(double theta, int d = 4) {
    std::vector<double> v(static_cast<std::size_t>(d));
    v[0] = std::cos(theta);
    v[1] = std::sin(theta);
    return v;
}

Tensor<double> rows(const std::vector<std::vector<double>>& r) {
    Tensor<double> t({static_cast<int>(r.size()), static_cast<int>(r[0].size())});
    for (std::size_t i = 0; i < r.size(); ++i) std::copy(r[i].begin(), r[i].end(), t.data.begin() + i * r[0].size());
    return t;
}

} // namespace

TEST(GanLosses, HandValues) {
    const std::vector<double> z{0.0, 0.0};
    const auto v = gan_losses(z, z);
    EXPECT_NEAR(v.d_loss, 2 * std::log(2.0), 1e-12);
    EXPECT_NEAR(v.g_loss, std::log(2.0), 1e-12);
    const std::vector<double> hi{40.0}, lo{-40.0};
    EXPECT_LT(gan_losses(hi, lo).d_loss, 1e-15);
    double prev = 1e9;
    for (double f = -5; f <= 5; f += 0.5) {
        const std::vector<double> fake{f};
        const double g = gan_losses(z, fake).g_loss;
        EXPECT_LT(g, prev);
        prev = g;
    }
    EXPECT_NEAR(gan_losses(z, z, GanObjective::Minimax).g_loss, -std::log(2.0), 1e-12);
    EXPECT_THROW(gan_losses({}, z), ArgumentError);
}

TEST(GanLosses, VarFormsMatchPlain) {
    const Tensor<double> r({3}, {0.3, -1.2, 2.0}), f({3}, {-0.5, 0.1, 1.7});
    const auto plain = gan_losses(r.data, f.data);
    EXPECT_NEAR(discriminator_loss(ag::Var<double>::constant(r), ag::Var<double>::constant(f)).item(), plain.d_loss,
                1e-12);
    EXPECT_NEAR(generator_loss(ag::Var<double>::constant(f), GanObjective::NonSaturating).item(), plain.g_loss, 1e-12);
}

TEST(IdentityLosses, ClampedValues) {
    LossConfig cfg;
    const auto e0 = at_angle(0.0);
    auto v = identity_losses(e0, e0, at_angle(std::acos(0.17)), cfg);
    EXPECT_DOUBLE_EQ(v.theta_same, 0.0);
    EXPECT_DOUBLE_EQ(v.l_pull, 0.70);
    v = identity_losses(e0, at_angle(0.9), at_angle(1.40), cfg);
    EXPECT_NEAR(v.l_pull, 0.9, 1e-12);
    EXPECT_NEAR(v.l_push, -1.40, 1e-12);
    EXPECT_NEAR(std::cos(1.40), 0.16997, 1e-5);
    v = identity_losses(e0, at_angle(0.3), at_angle(2.5), cfg);
    EXPECT_NEAR(v.l_push, -1.40, 1e-12);
    v = identity_losses(e0, at_angle(0.3), at_angle(1.0), cfg);
    EXPECT_NEAR(v.l_push, -1.0, 1e-12);
    auto bad = at_angle(0.0);
    bad[0] = 1.01;
    EXPECT_THROW(identity_losses(e0, bad, e0, cfg), ArgumentError);
}

TEST(PoseLosses, ClampedValues) {
    LossConfig cfg;
    auto v = pose_losses({0, 0, 0}, {1, 2, 2}, {0, 0, 0}, cfg);
    EXPECT_DOUBLE_EQ(v.d_vary, 9.0);
    EXPECT_DOUBLE_EQ(v.l_vary, -3.0);
    EXPECT_DOUBLE_EQ(v.l_match, 0.0);
    v = pose_losses({0, 0, 0}, {1, 0, 0}, {2, 1, 0}, cfg);
    EXPECT_DOUBLE_EQ(v.l_vary, -1.0);
    EXPECT_DOUBLE_EQ(v.l_match, 5.0);
}

TEST(TotalLoss, WeightedSum) {
    LossConfig cfg;
    AuxLossReport r;
    r.l_pull = 0.7;
    r.l_push = -1.4;
    r.l_vary = -3.0;
    r.l_match = 0.0;
    EXPECT_NEAR(total_generator_loss(1.0, r, cfg), 0.63, 1e-12);
    cfg.lambda_aux = 0.0;
    EXPECT_DOUBLE_EQ(total_generator_loss(1.0, r, cfg), 1.0);
}

TEST(LossConfig, Validation) {
    LossConfig c;
    EXPECT_NO_THROW(c.validate());
    c.tau_pull = 2.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.tau_match = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AuxLosses, BatchReportMatchesPlain) {
    LossConfig cfg;
    const auto e0 = rows({at_angle(0.0), at_angle(0.2)});
    const auto ep = rows({at_angle(0.9), at_angle(0.3)});
    const auto em = rows({at_angle(1.1), at_angle(2.2)});
    const auto p0 = rows({{0, 0, 0}, {0.5, 0.5, 0.1}});
    const auto pp = rows({{1, 0, 0}, {2, 2, 0}});
    const auto pm = rows({{0.2, 0, 0}, {3, 0, 0}});
    using V = ag::Var<double>;
    const auto out = aux_losses(V::constant(e0), V::constant(ep), V::constant(em), V::constant(p0), V::constant(pp),
                                V::constant(pm), cfg);
    double pull = 0, push = 0, vary = 0, match = 0;
    for (int i = 0; i < 2; ++i) {
        const auto iv = identity_losses(std::span(e0.ptr() + 4 * i, 4), std::span(ep.ptr() + 4 * i, 4),
                                        std::span(em.ptr() + 4 * i, 4), cfg);
        const auto pv = pose_losses({p0[3 * i], p0[3 * i + 1], p0[3 * i + 2]}, {pp[3 * i], pp[3 * i + 1], pp[3 * i + 2]},
                                    {pm[3 * i], pm[3 * i + 1], pm[3 * i + 2]}, cfg);
        pull += iv.l_pull / 2;
        push += iv.l_push / 2;
        vary += pv.l_vary / 2;
        match += pv.l_match / 2;
    }
    EXPECT_NEAR(out.report.l_pull, pull, 1e-12);
    EXPECT_NEAR(out.report.l_push, push, 1e-12);
    EXPECT_NEAR(out.report.l_vary, vary, 1e-12);
    EXPECT_NEAR(out.report.l_match, match, 1e-12);
    EXPECT_NEAR(out.report.total_aux, 0.1 * (pull + push + vary + match), 1e-12);
    EXPECT_NEAR(out.total.item(), out.report.total_aux, 1e-12);
}

TEST(AuxLosses, GradientsAwayFromClamps) {
    LossConfig cfg;
    // Raw vectors pass through normalization so every perturbation stays on the sphere.
    const auto e0 = rows({{1.0, 0.1, 0.2, -0.1}});
    const auto ep = rows({{0.3, 1.0, 0.1, 0.2}});   // ~1.2 rad from e0: above the pull floor
    const auto em = rows({{0.8, 0.6, -0.1, 0.2}});  // ~0.6 rad: below the push ceiling
    const auto p0 = rows({{0.1, 0.2, 0.3}});
    const auto pp = rows({{0.9, -0.4, 0.1}});
    const auto pm = rows({{0.5, 0.9, -0.3}});
    const auto in = std::vector<Tensor<double>>{e0, ep, em, p0, pp, pm};
    for (int which = 0; which < 4; ++which) {
        const synthid::testing::Fn f = [&, which](const auto& v) {
            const auto a = aux_losses(ag::l2_normalize_rows(v[0]), ag::l2_normalize_rows(v[1]),
                                      ag::l2_normalize_rows(v[2]), v[3], v[4], v[5], cfg);
            const ag::Var<double>* t[] = {&a.l_pull, &a.l_push, &a.l_vary, &a.l_match};
            return *t[which];
        };
        EXPECT_LT(synthid::testing::max_grad_error(f, in), 1e-4) << "loss " << which;
    }
}

TEST(AuxLosses, DeadZonesHaveZeroGradient) {
    LossConfig cfg;
    using V = ag::Var<double>;
    auto grads = [&](const Tensor<double>& ep, const Tensor<double>& em, const Tensor<double>& pp,
                     const Tensor<double>& pm, int which) {
        auto e0 = V::leaf(rows({at_angle(0.0)})), vp = V::leaf(ep), vm = V::leaf(em);
        auto p0 = V::leaf(rows({{0, 0, 0}})), qp = V::leaf(pp), qm = V::leaf(pm);
        const auto a = aux_losses(ag::l2_normalize_rows(e0), ag::l2_normalize_rows(vp), ag::l2_normalize_rows(vm), p0,
                                  qp, qm, cfg);
        const V* t[] = {&a.l_pull, &a.l_push, &a.l_vary, &a.l_match};
        ag::backward(*t[which]);
        double m = 0;
        for (auto* v : {&vp, &vm, &qp, &qm})
            for (double g : v->grad().data) m = std::max(m, std::abs(g));
        return m;
    };
    const auto ep_in = rows({at_angle(0.70 - 0.01)}), ep_out = rows({at_angle(0.70 + 0.01)});
    const auto em_in = rows({at_angle(1.40 + 0.01)}), em_out = rows({at_angle(1.40 - 0.01)});
    const auto pp_in = rows({{1.8, 0, 0}}), pp_out = rows({{1.7, 0, 0}});  // 3.24 vs 2.89 against cap 3.0
    const auto pm_in = rows({{2.3, 0, 0}}), pm_out = rows({{2.2, 0, 0}});  // 5.29 vs 4.84 against cap 5.0
    EXPECT_LE(grads(ep_in, em_in, pp_in, pm_in, 0), 1e-8);
    EXPECT_GT(grads(ep_out, em_in, pp_in, pm_in, 0), 1e-3);
    EXPECT_LE(grads(ep_in, em_in, pp_in, pm_in, 1), 1e-8);
    EXPECT_GT(grads(ep_in, em_out, pp_in, pm_in, 1), 1e-3);
    EXPECT_LE(grads(ep_in, em_in, pp_in, pm_in, 2), 1e-8);
    EXPECT_GT(grads(ep_in, em_in, pp_out, pm_in, 2), 1e-3);
    EXPECT_LE(grads(ep_in, em_in, pp_in, pm_in, 3), 1e-8);
    EXPECT_GT(grads(ep_in, em_in, pp_in, pm_out, 3), 1e-3);
}

TEST(AuxLosses, TripletOrientation) {
    LossConfig cfg;
    using V = ag::Var<double>;
    auto total = [&](double same, double diff) {
        return aux_losses(V::constant(rows({at_angle(0)})), V::constant(rows({at_angle(same)})),
                          V::constant(rows({at_angle(diff)})), V::constant(rows({{0, 0, 0}})),
                          V::constant(rows({{1, 0, 0}})), V::constant(rows({{0, 0, 0}})), cfg)
            .report.total_aux;
    };
    EXPECT_LT(total(0.9, 1.0), total(1.0, 1.0));
    EXPECT_LT(total(0.9, 1.1), total(0.9, 1.0));
}

// Tiny double-precision discriminator for R1 checks.
struct TinyDisc {
    nn::ParamSet<double> ps;
    nn::Conv2d<double> conv;
    nn::Linear<double> fc;
    TinyDisc() {
        Rng rng(3);
        conv = nn::Conv2d<double>(ps, "c", 2, 3, 3, 2, 1, rng, 1.3);
        fc = nn::Linear<double>(ps, "fc", 3 * 2 * 2, 1, rng);
    }
    ag::Var<double> operator()(const ag::Var<double>& x) const {
        return ag::reshape(fc(ag::reshape(ag::leaky_relu(conv(x), 0.2), {x.dim(0), 12})), {x.dim(0)});
    }
};

TEST(R1, FiniteDifferenceHvpMatchesBruteForce) {
    TinyDisc d;
    Rng rng(9);
    Tensor<double> x({2, 2, 4, 4});
    for (auto& v : x.data) v = rng.normal();
    const double gamma = 1.0;
    auto params = d.ps.vars();
    for (auto& p : params) p.zero_grad();
    const std::function<ag::Var<double>(const ag::Var<double>&)> disc = [&](const ag::Var<double>& v) { return d(v); };
    const double pen = r1_penalty<double>(disc, x, params, gamma, 1.0, 1e-5);

    auto penalty_value = [&] {
        auto xv = ag::Var<double>::leaf(x);
        ag::backward(ag::sum(d(xv)));
        for (auto& p : params) p.zero_grad();
        return 0.5 * gamma * sum_squares(xv.grad()) / 2.0;
    };
    std::vector<Tensor<double>> analytic;
    for (auto& p : params) analytic.push_back(p.grad());
    EXPECT_NEAR(pen, penalty_value(), 1e-12);
    double worst = 0;
    const double h = 1e-6;
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t k = 0; k < params[i].size(); ++k) {
            auto& w = params[i].mutable_value();
            const double w0 = w[k];
            w[k] = w0 + h;
            const double up = penalty_value();
            w[k] = w0 - h;
            const double dn = penalty_value();
            w[k] = w0;
            const double num = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(num - analytic[i][k]) / std::max(1.0, std::abs(num)));
        }
    EXPECT_LT(worst, 1e-5);
}

TEST(R1, PreservesExistingGradients) {
    TinyDisc d;
    Tensor<double> x({1, 2, 4, 4}, 0.3);
    auto params = d.ps.vars();
    for (auto& p : params) p.grad().fill(1.0);
    const std::function<ag::Var<double>(const ag::Var<double>&)> disc = [&](const ag::Var<double>& v) { return d(v); };
    r1_penalty<double>(disc, x, params, 0.0, 1.0);
    for (auto& p : params)
        for (double g : p.grad().data) EXPECT_DOUBLE_EQ(g, 1.0);
}
