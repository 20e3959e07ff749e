#include <gtest/gtest.h>

#include <random>

#include "support/gradcheck.hpp"
#include "synthid/nn.hpp"

using synthid::Shape;
using synthid::Tensor;
using synthid::ag::Var;
using synthid::testing::Fn;
using synthid::testing::max_grad_error;
namespace ag = synthid::ag;

namespace {

Tensor<double> randn(Shape s, unsigned seed, double scale = 1.0, double offset = 0.0) {
    std::mt19937_64 g(seed);
    std::normal_distribution<double> n;
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = offset + scale * n(g);
    return t;
}

// Weighted sum so every output element gets a distinct upstream gradient.
Var<double> probe(const Var<double>& y) {
    Tensor<double> w(y.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.37 * static_cast<double>(i));
    return ag::sum(ag::mul(y, Var<double>::constant(w)));
}

constexpr double kTol = 1e-6;

} // namespace

TEST(Autograd, ElementwiseBinary) {
    auto a = randn({3, 4}, 1), b = randn({3, 4}, 2, 1.0, 3.0);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::add(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::sub(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::mul(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::div(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::atan2(v[0], v[1])); }, {a, b}), kTol);
}

TEST(Autograd, ElementwiseUnary) {
    auto a = randn({2, 5}, 3);
    auto pos = randn({2, 5}, 4, 0.3, 2.0);
    auto unit = randn({2, 5}, 5, 0.3, 0.0);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::tanh(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::softplus(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::leaky_relu(v[0], 0.2)); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::square(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::cos(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::sin(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::exp(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::sqrt(v[0])); }, {pos}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::log(v[0])); }, {pos}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::acos_clipped(v[0])); }, {unit}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::clamp_min(v[0], 0.1)); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::clamp_max(v[0], 0.1)); }, {a}), kTol);
}

TEST(Autograd, ShapingAndReductions) {
    auto a = randn({3, 4}, 6), b = randn({3, 2}, 7), c = randn({3}, 8), r = randn({4}, 9);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::concat_cols(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::slice_rows(v[0], 1, 3)); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::cat_rows<double>({v[0], v[1]})); },
                             {a, randn({2, 4}, 10)}),
              kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::column(v[0], 2)); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::stack_cols<double>({v[0], v[1]})); },
                             {c, randn({3}, 11)}),
              kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::sum_cols(v[0])); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::sum_middle(v[0], 2, 3, 2)); }, {randn({12}, 12)}),
              kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::sub_colvec(v[0], v[1])); }, {a, c}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::mul_colvec(v[0], v[1])); }, {a, c}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::mul_rowvec(v[0], v[1])); }, {a, r}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return ag::mean(v[0]); }, {a}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::reshape(v[0], {4, 3})); }, {a}), kTol);
}

TEST(Autograd, MinibatchStddev) {
    const auto x = randn({8, 5}, 13);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::minibatch_stddev(v[0], 4)); }, {x}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::minibatch_stddev(v[0], 3)); }, {x}), kTol);
    const auto y = ag::minibatch_stddev(Var<double>::constant(x), 4).value();
    ASSERT_EQ(y.shape, (Shape{8, 6}));
    for (int g = 0; g < 2; ++g) {
        double acc = 0;
        for (int j = 0; j < 5; ++j) {
            double m = 0, ss = 0;
            for (int r = 4 * g; r < 4 * g + 4; ++r) m += x[r * 5 + j] / 4;
            for (int r = 4 * g; r < 4 * g + 4; ++r) ss += (x[r * 5 + j] - m) * (x[r * 5 + j] - m);
            acc += std::sqrt(ss / 4 + 1e-8) / 5;
        }
        for (int r = 4 * g; r < 4 * g + 4; ++r) EXPECT_NEAR(y[r * 6 + 5], acc, 1e-12);
    }
}

TEST(Autograd, DenseAndNormalize) {
    auto x = randn({3, 5}, 13), w = randn({4, 5}, 14), b = randn({4}, 15);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::linear(v[0], v[1], v[2], 0.7)); }, {x, w, b}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::matmul_nt(v[0], v[1])); }, {x, w}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::l2_normalize_rows(v[0])); }, {x}), kTol);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::rowdot(v[0], v[1])); }, {x, randn({3, 5}, 16)}),
              kTol);
}

TEST(Autograd, Convolutions) {
    auto x = randn({2, 3, 6, 6}, 17), w = randn({4, 3, 3, 3}, 18), b = randn({4}, 19);
    for (int stride : {1, 2}) {
        Fn f = [stride](const auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], stride, 1, 0.5)); };
        EXPECT_LT(max_grad_error(f, {x, w, b}), kTol) << "stride " << stride;
    }
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::upsample2x(v[0])); }, {x}), kTol);
    auto gamma = randn({2, 3}, 20), beta = randn({2, 3}, 21);
    EXPECT_LT(max_grad_error([](const auto& v) { return probe(ag::modulate(v[0], v[1], v[2])); }, {x, gamma, beta}),
              kTol);
    auto noise = randn({2, 1, 6, 6}, 22);
    EXPECT_LT(max_grad_error([noise](const auto& v) { return probe(ag::add_noise(v[0], v[1], noise)); },
                             {x, randn({3}, 23)}),
              kTol);
}

TEST(Autograd, ConvMatchesDirectSum) {
    auto x = randn({1, 2, 5, 5}, 24), w = randn({3, 2, 3, 3}, 25);
    auto y = ag::conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>{}, 2, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
    for (int o = 0; o < 3; ++o)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                double acc = 0;
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = 2 * oy - 1 + ky, ix = 2 * ox - 1 + kx;
                            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                            acc += x[(c * 5 + iy) * 5 + ix] * w[((o * 2 + c) * 3 + ky) * 3 + kx];
                        }
                EXPECT_NEAR(y.value()[(o * 3 + oy) * 3 + ox], acc, 1e-12);
            }
}

TEST(Autograd, MarginHeadAndCrossEntropy) {
    auto e = randn({3, 4}, 26, 0.3);
    std::vector<int> labels{0, 2, 1};
    Fn f = [&](const auto& v) {
        auto cosines = ag::tanh(v[0]);  // keeps entries inside (-1, 1)
        return ag::cross_entropy(ag::margin_logits(cosines, labels, 8.0, 0.5), labels);
    };
    EXPECT_LT(max_grad_error(f, {e}), kTol);
}

TEST(Autograd, FrozenLeafPassesGradientToInputOnly) {
    auto w = Var<double>::leaf(randn({2, 3}, 27), false);
    auto x = Var<double>::leaf(randn({4, 3}, 28));
    ag::backward(ag::sum(ag::matmul_nt(x, w)));
    EXPECT_EQ(w.node()->grad.size(), 0u);
    EXPECT_GT(synthid::sum_squares(x.grad()), 0.0);
}

TEST(Adam, FirstStepMovesEachWeightByLearningRate) {
    auto p = Var<double>::leaf(Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}));
    synthid::nn::Adam<double> opt({p}, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 0.0});
    p.grad() = Tensor<double>({3}, std::vector<double>{4.0, -0.5, 1e-3});
    opt.step();
    // Bias-corrected first step is lr * sign(g).
    EXPECT_NEAR(p.value()[0], 0.9, 1e-12);
    EXPECT_NEAR(p.value()[1], -1.9, 1e-12);
    EXPECT_NEAR(p.value()[2], 0.4, 1e-12);
}
