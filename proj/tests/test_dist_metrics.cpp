#include <gtest/gtest.h>

#include <filesystem>

#include "synthid/dist_metrics.hpp"

using namespace synthid;
namespace fs = std::filesystem;

namespace {

GaussianFit gauss(std::vector<double> mu, const Eigen::MatrixXd& s) {
    GaussianFit g;
    g.mu = Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
    g.sigma = s;
    g.n = 1000;
    return g;
}

GaussianFit scalar(double mu, double sd) {
    Eigen::MatrixXd s(1, 1);
    s(0, 0) = sd * sd;
    return gauss({mu}, s);
}

Eigen::MatrixXd random_spd(Rng& rng, int d) {
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::MatrixXd samples(Rng& rng, int n, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    const Eigen::MatrixXd l = sigma.llt().matrixL();
    Eigen::MatrixXd x(n, mu.size());
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z(mu.size());
        for (auto& v : z) v = rng.normal();
        x.row(i) = (mu + l * z).transpose();
    }
    return x;
}

} // namespace

TEST(Gaussian, TrivialFits) {
    Eigen::MatrixXd two(2, 3);
    two << 1, 2, 3, 1, 2, 3;
    EXPECT_LT(fit_gaussian(two).sigma.norm(), 1e-15);
    const auto g = fit_gaussian(Eigen::MatrixXd::Identity(4, 4));
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.mu(i), 0.25);
    EXPECT_THROW(fit_gaussian(Eigen::MatrixXd::Ones(1, 3)), ArgumentError);
}

TEST(Gaussian, RecoversSamplingParameters) {
    Rng rng(9);
    Eigen::VectorXd mu(4);
    mu << 1, -2, 0.5, 3;
    Eigen::MatrixXd s(4, 4);
    s << 1.0, 0.3, 0.0, 0.1, 0.3, 0.8, 0.2, 0.0, 0.0, 0.2, 0.5, 0.05, 0.1, 0.0, 0.05, 1.2;
    const auto g = fit_gaussian(samples(rng, 100000, mu, s));
    EXPECT_LT((g.mu - mu).cwiseAbs().maxCoeff(), 0.02);
    EXPECT_LT((g.sigma - s).cwiseAbs().maxCoeff(), 0.05);
    EXPECT_LT((g.sigma - g.sigma.transpose()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Frechet, OneDimensionalClosedForm) {
    EXPECT_NEAR(frechet_distance(scalar(0, 1), scalar(3, 1)).distance2, 9.0, 1e-8);
    EXPECT_NEAR(frechet_distance(scalar(0, 1), scalar(0, 2)).distance2, 1.0, 1e-8);
    for (double m1 : {-1.0, 0.0, 2.5})
        for (double s1 : {0.5, 1.0, 3.0})
            for (double s2 : {0.1, 2.0})
                EXPECT_NEAR(frechet_distance(scalar(m1, s1), scalar(1.0, s2)).distance2,
                            (m1 - 1.0) * (m1 - 1.0) + (s1 - s2) * (s1 - s2), 1e-8);
}

TEST(Frechet, IdenticalIsZeroAndSymmetric) {
    Rng rng(5);
    for (int d : {1, 3, 8, 16}) {
        const auto a = gauss(std::vector<double>(d, 0.3), random_spd(rng, d));
        const auto b = gauss(std::vector<double>(d, -0.2), random_spd(rng, d));
        EXPECT_NEAR(frechet_distance(a, a).distance2, 0.0, 1e-9);
        EXPECT_NEAR(frechet_distance(a, b).distance2, frechet_distance(b, a).distance2, 1e-9);
        EXPECT_GE(frechet_distance(a, b).distance2, 0.0);
    }
}

TEST(Frechet, DiagonalClosedForm) {
    Rng rng(6);
    for (int d = 1; d <= 8; ++d) {
        std::vector<double> ma, mb;
        Eigen::VectorXd va(d), vb(d);
        double expect = 0;
        for (int i = 0; i < d; ++i) {
            ma.push_back(rng.normal());
            mb.push_back(rng.normal());
            va(i) = rng.uniform(0.1, 4);
            vb(i) = rng.uniform(0.1, 4);
            expect += std::pow(ma[i] - mb[i], 2) + std::pow(std::sqrt(va(i)) - std::sqrt(vb(i)), 2);
        }
        const auto r = frechet_distance(gauss(ma, va.asDiagonal()), gauss(mb, vb.asDiagonal()));
        EXPECT_NEAR(r.distance2, expect, 1e-8) << "d=" << d;
    }
}

TEST(Frechet, TranslationShiftsByMeanTerm) {
    Rng rng(7);
    const int d = 5;
    const auto s = random_spd(rng, d), s2 = random_spd(rng, d);
    std::vector<double> ma(d), mb(d);
    Eigen::VectorXd t(d);
    for (int i = 0; i < d; ++i) {
        ma[i] = rng.normal();
        mb[i] = rng.normal();
        t(i) = rng.normal();
    }
    const auto a = gauss(ma, s), b = gauss(mb, s2);
    auto shifted = b;
    shifted.mu += t;
    const Eigen::VectorXd delta = b.mu - a.mu;
    EXPECT_NEAR(frechet_distance(a, shifted).distance2 - frechet_distance(a, b).distance2,
                2 * delta.dot(t) + t.squaredNorm(), 1e-8);
}

TEST(Frechet, RankDeficientUsesEpsilon) {
    Eigen::MatrixXd flat = Eigen::MatrixXd::Zero(3, 3);
    flat(0, 0) = 1;
    const auto a = gauss({0, 0, 0}, flat), b = gauss({1, 0, 0}, Eigen::MatrixXd::Identity(3, 3));
    const auto r = frechet_distance(a, b);
    EXPECT_DOUBLE_EQ(r.eps, 1e-6);
    EXPECT_TRUE(std::isfinite(r.distance2));
    EXPECT_DOUBLE_EQ(frechet_distance(b, b).eps, 0.0);
    EXPECT_THROW(frechet_distance(a, scalar(0, 1)), ArgumentError);
}

TEST(Sqrtm, SquaresBackToStabilizedProduct) {
    Rng rng(12);
    for (int d : {1, 2, 6, 12}) {
        const auto a = random_spd(rng, d), b = random_spd(rng, d);
        const double eps = 1e-6;
        const auto root = sqrtm_product(a, b, eps);
        const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(d, d);
        const Eigen::MatrixXd prod = (a + eps * id) * (b + eps * id);
        EXPECT_LT((root * root - prod).norm() / prod.norm(), 1e-6);
        // Its trace is the one used inside the distance.
        const auto ga = gauss(std::vector<double>(d, 0), a), gb = gauss(std::vector<double>(d, 0), b);
        EXPECT_NEAR(frechet_distance(ga, gb, eps).distance2, (a + b + 2 * eps * id).trace() - 2 * root.trace(),
                    1e-7 * (1 + a.trace() + b.trace()));
    }
}

TEST(DistanceMatrix, PairCountsAndDiagonal) {
    Rng rng(1);
    const Eigen::MatrixXd s = Eigen::MatrixXd::Identity(3, 3);
    std::vector<Eigen::MatrixXd> f;
    for (int k = 0; k < 3; ++k) f.push_back(samples(rng, 200, Eigen::VectorXd::Constant(3, k), s));
    const auto m = distance_matrix({"a", "b", "c"}, f, "test");
    EXPECT_EQ(m.pairs.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_TRUE(std::isnan(m.d2[i][i]));
        for (int j = 0; j < 3; ++j)
            if (i != j) {
                EXPECT_DOUBLE_EQ(m.d2[i][j], m.d2[j][i]);
            }
    }
    const auto same = distance_matrix({"a", "a2"}, {f[0], f[0]}, "test");
    EXPECT_NEAR(same.d2[0][1], 0.0, 1e-9);
    const auto table = table_report(m, m);
    EXPECT_NE(table.find("X"), std::string::npos);
    EXPECT_THROW(distance_matrix({"a"}, {f[0]}, "test"), ArgumentError);
}

TEST(DistanceMatrix, IdentitySpaceSeparatesPools) {
    const auto dir = fs::temp_directory_path() / "synthid_dist_pools";
    fs::remove_all(dir);
    OracleWorldSpec w;
    const auto pool_a = sample_identity_pool(w, 30, 1);
    OracleExportOptions a{30, 8, 10, pool_a, {}}, a2{30, 8, 11, pool_a, {}}, b{30, 8, 12, {}, pool_a};
    export_oracle_dataset(w, a, dir / "A");
    export_oracle_dataset(w, a2, dir / "A2");
    export_oracle_dataset(w, b, dir / "B");
    const IdentitySpace space(std::make_shared<OracleEmbedder>(w));
    const auto m = distance_matrix({dir / "A" / "manifest.json", dir / "A2" / "manifest.json", dir / "B" / "manifest.json"},
                                   space);
    EXPECT_LT(m.d2[0][1], m.d2[0][2]);
}
