#include <gtest/gtest.h>

#include <set>

#include "support/gradcheck.hpp"
#include "synthid/aux_models.hpp"

using namespace synthid;
namespace ag = synthid::ag;

namespace {

std::vector<OracleFactors> random_factors(const OracleWorldSpec& w, int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<OracleFactors> fs(static_cast<std::size_t>(n));
    for (auto& f : fs) {
        f.identity = w.identity(rng.index(w.identity_count()));
        f.pose = w.sample_pose(rng);
    }
    return fs;
}

ImageBatch strip_truth(ImageBatch b) {
    b.truth.clear();
    return b;
}

} // namespace

TEST(OracleWorld, IdentityIndexRoundTrip) {
    OracleWorldSpec w;
    EXPECT_EQ(w.identity_count(), 648);
    for (int i = 0; i < w.identity_count(); ++i) EXPECT_EQ(w.index_of(w.identity(i)), i);
    EXPECT_THROW(w.identity(648), ArgumentError);
    EXPECT_THROW(w.validate(PoseFactors{2.0, 0.0, 0.0}), ArgumentError);
}

TEST(OracleWorld, RenderIsDeterministicAndBounded) {
    OracleWorldSpec w;
    const auto fs = random_factors(w, 16, 3);
    const auto a = render_oracle(fs, w), b = render_oracle(fs, w);
    EXPECT_EQ(a.pixels.data, b.pixels.data);
    for (float v : a.pixels.data) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(OracleWorld, DistinctIdentitiesGiveDistinctCanonicalImages) {
    OracleWorldSpec w;
    std::set<Buffer<float>> seen;
    for (int i = 0; i < w.identity_count(); ++i) seen.insert(render_glyph(w.identity(i), {}, w).data);
    EXPECT_EQ(static_cast<int>(seen.size()), w.identity_count());
}

TEST(OracleWorld, PoolExcludesAndIsDeterministic) {
    OracleWorldSpec w;
    const auto a = sample_identity_pool(w, 100, 7);
    EXPECT_EQ(a, sample_identity_pool(w, 100, 7));
    const auto b = sample_identity_pool(w, 100, 8, a);
    for (int i : b) EXPECT_EQ(std::count(a.begin(), a.end(), i), 0);
    EXPECT_THROW(sample_identity_pool(w, 600, 1, a), ArgumentError);
}

TEST(OracleWorld, PixelPoseTracksTruth) {
    OracleWorldSpec w;
    const auto batch = render_oracle(random_factors(w, 64, 11), w);
    OraclePoseEstimator est(w);
    const auto pixel = est.estimate_pose(strip_truth(batch));
    const auto exact = est.estimate_pose(batch);
    double worst_t = 0.0, worst_r = 0.0;
    for (std::size_t i = 0; i < pixel.size(); ++i) {
        EXPECT_EQ(exact[i][0], batch.truth[i].pose.tx);
        worst_t = std::max({worst_t, std::abs(pixel[i][0] - batch.truth[i].pose.tx),
                            std::abs(pixel[i][1] - batch.truth[i].pose.ty)});
        worst_r = std::max(worst_r, std::abs(pixel[i][2] - batch.truth[i].pose.roll));
    }
    EXPECT_LT(worst_t, 0.05);
    EXPECT_LT(worst_r, 0.08);
}

TEST(OracleWorld, PixelEmbeddingSeparatesIdentities) {
    OracleWorldSpec w;
    OracleEmbedder emb(w);
    Rng rng(5);
    double worst_same = 0.0;
    std::vector<double> diff;
    for (int t = 0; t < 200; ++t) {
        const auto a = w.identity(rng.index(w.identity_count()));
        const auto b = w.identity(rng.index(w.identity_count()));
        std::vector<OracleFactors> fs{{a, w.sample_pose(rng)}, {a, w.sample_pose(rng)}, {b, w.sample_pose(rng)}};
        const auto e = emb.embed(strip_truth(render_oracle(fs, w)));
        worst_same = std::max(worst_same, angle_between(e[0], e[1]));
        if (a != b) diff.push_back(angle_between(e[0], e[2]));
    }
    std::sort(diff.begin(), diff.end());
    EXPECT_LT(worst_same, diff[diff.size() / 20]);
    EXPECT_GT(diff[diff.size() / 2], 0.5);
    EXPECT_LT(worst_same, 0.2);
}

TEST(OracleWorld, DecodedReadoutRecoversEveryIdentity) {
    OracleWorldSpec w;
    const OracleEmbedder emb(w, OracleEmbedder::Readout::Decoded);
    Rng rng(31);
    std::vector<OracleFactors> fs;
    for (int i = 0; i < w.identity_count(); ++i) fs.push_back({w.identity(i), w.sample_pose(rng)});
    const auto batch = render_oracle(fs, w);
    const auto from_pixels = emb.embed(strip_truth(batch));
    const auto from_truth = emb.embed(batch);
    ASSERT_EQ(emb.dim(), w.identity_count());
    for (int i = 0; i < w.identity_count(); ++i) {
        EXPECT_EQ(from_pixels[i].e, from_truth[i].e) << "identity " << i;
        EXPECT_DOUBLE_EQ(from_truth[i].e[i], 1.0);
    }
}

TEST(OracleWorld, ReadbackMatchesCanonicalPixelPath) {
    OracleWorldSpec w;
    OracleEmbedder emb(w);
    const auto id = w.identity(123);
    const auto e = emb.embed(strip_truth(render_oracle(id, {}, w)));
    const auto& c = emb.identity_embedding(id);
    EXPECT_NEAR(e[0].norm(), 1.0, 1e-6);
    for (std::size_t k = 0; k < c.e.size(); ++k) EXPECT_NEAR(e[0].e[k], c.e[k], 1e-5);
}

TEST(OracleWorld, MomentReadoutGradients) {
    OracleWorldSpec w;
    w.resolution = 8;
    OracleFactors f;
    f.identity = w.identity(40);
    f.pose = {0.4, -0.3, 0.25};
    const auto img = render_oracle(std::span<const OracleFactors>(&f, 1), w).pixels.cast<double>();
    const synthid::testing::Fn pose_fn = [&](const auto& v) {
        const auto r = oracle_moments(v[0], w);
        return ag::sum(ag::mul(r.pose, ag::Var<double>::constant(Tensor<double>({1, 3}, {0.7, -0.4, 1.3}))));
    };
    const synthid::testing::Fn feat_fn = [&](const auto& v) {
        const auto r = oracle_moments(v[0], w);
        Tensor<double> p({1, kOracleFeatures});
        for (int k = 0; k < kOracleFeatures; ++k) p[k] = std::sin(1.0 + k);
        return ag::sum(ag::mul(r.features, ag::Var<double>::constant(p)));
    };
    EXPECT_LT(synthid::testing::max_grad_error(pose_fn, {img}), 1e-5);
    EXPECT_LT(synthid::testing::max_grad_error(feat_fn, {img}), 1e-5);
}

TEST(OracleWorld, ResolutionMismatchIsConfigError) {
    OracleWorldSpec w;
    OracleWorldSpec small = w;
    small.resolution = 16;
    OracleEmbedder emb(w);
    EXPECT_THROW(emb.embed(strip_truth(render_oracle(small.identity(0), {}, small))), ConfigError);
}

TEST(MarginHead, LogitsMatchDefinition) {
    MarginHeadConfig cfg{.s = 64.0, .m = 0.5, .n_classes = 3};
    const std::vector<double> e{1.0, 0.0};
    const std::vector<double> W{1.0, 0.0, 0.0, 1.0, -0.6, 0.8};
    const auto l = angular_logits(e, W, 0, cfg);
    EXPECT_NEAR(l[0], 64.0 * std::cos(0.5), 1e-12);
    EXPECT_NEAR(l[1], 0.0, 1e-12);
    EXPECT_NEAR(l[2], 64.0 * -0.6, 1e-12);
    EXPECT_THROW(angular_logits(e, W, 3, cfg), ArgumentError);
    EXPECT_THROW((MarginHeadConfig{.s = 1, .m = 2.0, .n_classes = 1}.validate()), ArgumentError);
}
