#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "synthid/privacy_attack.hpp"

using namespace synthid;

namespace {

std::vector<double> unit_rows(Rng& rng, int n, int d) {
    std::vector<double> w(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int k = 0; k < d; ++k) s += std::pow(w[i * d + k] = rng.normal(), 2);
        for (int k = 0; k < d; ++k) w[i * d + k] /= std::sqrt(s);
    }
    return w;
}

EmbeddingVector unit(std::vector<double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    for (double& x : v) x /= std::sqrt(s);
    return {v};
}

// Pairwise count of member-over-non-member wins, ties half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& m) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (m[i] && !m[j]) {
                pairs += 1;
                wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return wins / pairs;
}

} // namespace

TEST(Entropy, UniformAndPeaked) {
    MarginHeadConfig head{64, 0.5, 8};
    // Embedding orthogonal to all class weights: equal logits, maximal entropy.
    std::vector<double> w(8 * 9, 0.0);
    for (int j = 0; j < 8; ++j) w[j * 9 + j] = 1;
    const std::vector<double> e{0, 0, 0, 0, 0, 0, 0, 0, 1};
    EXPECT_NEAR(prediction_entropy(e, w, 0, head, false), std::log(8.0), 1e-12);
    const std::vector<double> hit{1, 0, 0, 0, 0, 0, 0, 0, 0};
    EXPECT_LT(prediction_entropy(hit, w, 0, head, false), 1e-10);
}

TEST(Entropy, BoundsHoldOnRandomInputs) {
    Rng rng(3);
    for (int t = 0; t < 300; ++t) {
        const int k = 2 + rng.index(30), d = 2 + rng.index(10);
        MarginHeadConfig head{rng.uniform(1, 80), rng.uniform(0, 1), k};
        const auto w = unit_rows(rng, k, d);
        const auto e = unit_rows(rng, 1, d);
        const double h = prediction_entropy(e, w, rng.index(k), head, rng.index(2) == 1);
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(static_cast<double>(k)) + 1e-12);
    }
}

TEST(Auc, RankStatisticMatchesPairwiseAndTrapezoid) {
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> s;
        std::vector<int> m;
        for (int i = 0; i < 80; ++i) {
            m.push_back(i < 30 || rng.index(3) == 0);
            s.push_back(std::round((rng.normal() + (m.back() ? 0.7 : 0.0)) * 4) / 4);
        }
        const double a = rank_auc(s, m);
        EXPECT_NEAR(a, pairwise_auc(s, m), 1e-12);
        EXPECT_NEAR(a, trapezoid_auc(s, m), 1e-9);
    }
    const std::vector<double> s{3, 2, 1, 0};
    const std::vector<int> m{1, 1, 0, 0};
    EXPECT_DOUBLE_EQ(rank_auc(s, m), 1.0);
    const std::vector<int> only{1, 1, 1, 1};
    EXPECT_THROW(rank_auc(s, only), ArgumentError);
}

TEST(Attack, CutoffCountsLowestCeilHalf) {
    MarginHeadConfig head{10, 0.0, 2};
    const std::vector<double> w{1, 0, 0, 1};
    AttackSamples mem, non;
    // Members point at their class (low entropy); non-members sit on the diagonal.
    mem.embeddings = {unit({1, 0}), unit({0, 1}), unit({1, 0.05})};
    mem.labels = {0, 1, 0};
    non.embeddings = {unit({1, 1}), unit({1, 1.01})};
    const auto r = run_attack(w, head, mem, non, AttackVariant::NoMargin);
    ASSERT_EQ(r.records.size(), 5u);
    EXPECT_DOUBLE_EQ(r.member_fraction, 1.0);  // ceil(5/2) = 3 lowest are the members
    EXPECT_DOUBLE_EQ(r.auc, 1.0);
    for (std::size_t i = 1; i < r.records.size(); ++i) EXPECT_LE(r.records[i - 1].entropy, r.records[i].entropy);
    int total = 0;
    for (int c : r.histogram.members) total += c;
    for (int c : r.histogram.nonmembers) total += c;
    EXPECT_EQ(total, 5);
}

TEST(Attack, NonMembersScoredAgainstNearestClass) {
    MarginHeadConfig head{16, 0.5, 3};
    Rng rng(2);
    const auto w = unit_rows(rng, 3, 5);
    const auto e = unit_rows(rng, 1, 5);
    AttackSamples mem{{EmbeddingVector{unit_rows(rng, 1, 5)}}, {0}, {}};
    AttackSamples non{{EmbeddingVector{e}}, {}, {}};
    const auto r = run_attack(w, head, mem, non, AttackVariant::Margin);
    const int c = nearest_class(e, w, 3);
    for (const auto& rec : r.records)
        if (!rec.member) {
            EXPECT_NEAR(rec.entropy, prediction_entropy(e, w, c, head, true), 1e-12);
        }
}

TEST(Attack, RandomEmbeddingsGiveChance) {
    // Both populations drawn from the same distribution: no signal either way.
    Rng rng(17);
    const int k = 20, d = 16;
    MarginHeadConfig head{64, 0.5, k};
    const auto w = unit_rows(rng, k, d);
    AttackSamples mem, non;
    for (int i = 0; i < 600; ++i) {
        mem.embeddings.push_back({unit_rows(rng, 1, d)});
        mem.labels.push_back(rng.index(k));
        non.embeddings.push_back({unit_rows(rng, 1, d)});
    }
    for (auto v : {AttackVariant::NoMargin}) {
        const auto r = run_attack(w, head, mem, non, v);
        EXPECT_NEAR(r.member_fraction, 0.5, 0.05);
        EXPECT_NEAR(r.auc, 0.5, 0.05);
    }
}

TEST(Attack, RejectsEmptyPopulations) {
    MarginHeadConfig head{16, 0.5, 2};
    const std::vector<double> w{1, 0, 0, 1};
    AttackSamples mem{{unit({1, 0})}, {0}, {}};
    EXPECT_THROW(run_attack(w, head, mem, AttackSamples{}), ArgumentError);
    EXPECT_THROW(parse_attack_variant("loud"), ConfigError);
}
