#pragma once

// Entropy-gap membership inference.
//
// Each sample is embedded, scored against the model's unit class weights
// with the angular-margin head, and summarized by the entropy (nats) of the
// softmax. Members use their training label; non-members have none and use
// the nearest class by cosine. The margin on that class is applied in the
// default variant and skipped in the no-margin variant.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/aux_models.hpp"

namespace synthid {

inline double entropy_of(std::span<const double> p) {
    double h = 0;
    for (double v : p)
        if (v > 0) h -= v * std::log(v);
    return h;
}

inline double prediction_entropy(std::span<const double> e, std::span<const double> class_weights, int label,
                                 const MarginHeadConfig& head, bool apply_margin = true) {
    const auto logits = angular_logits(e, class_weights, label, head, apply_margin);
    const double h = entropy_of(softmax(logits));
    return std::clamp(h, 0.0, std::log(static_cast<double>(head.n_classes)));
}

/// Class with the largest cosine to e.
inline int nearest_class(std::span<const double> e, std::span<const double> class_weights, int n_classes) {
    const std::size_t d = e.size();
    int best = 0;
    double bc = -2;
    for (int j = 0; j < n_classes; ++j) {
        double c = 0;
        for (std::size_t k = 0; k < d; ++k) c += e[k] * class_weights[static_cast<std::size_t>(j) * d + k];
        if (c > bc) {
            bc = c;
            best = j;
        }
    }
    return best;
}

enum class AttackVariant { Margin, NoMargin };

inline std::string to_string(AttackVariant v) { return v == AttackVariant::Margin ? "margin" : "no-margin"; }
inline AttackVariant parse_attack_variant(const std::string& s) {
    if (s == "margin") return AttackVariant::Margin;
    if (s == "no-margin") return AttackVariant::NoMargin;
    throw ConfigError("unknown attack variant '" + s + "' (known: margin, no-margin)");
}

struct EntropyRecord {
    std::string id;
    bool member = false;
    double entropy = 0;
};

struct Histogram {
    double lo = 0, hi = 0;
    std::vector<int> members, nonmembers;
};

struct AttackReport {
    AttackVariant variant = AttackVariant::Margin;
    int n_classes = 0;
    double member_fraction = 0;  // among the lowest ceil(N/2) entropies
    double auc = 0;              // rank statistic
    double auc_trapezoid = 0;    // ROC integration
    std::vector<EntropyRecord> records;  // ascending entropy
    Histogram histogram;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"variant", to_string(variant)},
                                 {"n_classes", n_classes},
                                 {"n_samples", records.size()},
                                 {"member_fraction_lowest_half", member_fraction},
                                 {"auc", auc},
                                 {"auc_trapezoid", auc_trapezoid}};
        auto& h = j["histogram"];
        h["lo"] = histogram.lo;
        h["hi"] = histogram.hi;
        h["members"] = histogram.members;
        h["nonmembers"] = histogram.nonmembers;
        auto& r = j["records"] = nlohmann::ordered_json::array();
        for (const auto& e : records) r.push_back({{"id", e.id}, {"member", e.member}, {"entropy", e.entropy}});
        return j;
    }

    /// Two-column histogram table: bin centre, member count, non-member count.
    std::string histogram_table() const {
        std::string out = "# entropy_bin_centre members nonmembers\n";
        const int bins = static_cast<int>(histogram.members.size());
        for (int b = 0; b < bins; ++b) {
            const double c = histogram.lo + (b + 0.5) * (histogram.hi - histogram.lo) / bins;
            out += std::to_string(c) + " " + std::to_string(histogram.members[b]) + " " +
                   std::to_string(histogram.nonmembers[b]) + "\n";
        }
        return out;
    }
};

/// AUC of score `s` (higher = member) by the Mann-Whitney rank statistic, ties counted half.
inline double rank_auc(std::span<const double> s, std::span<const int> member) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
    double rank_sum = 0;
    long pos = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && s[idx[j]] == s[idx[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (member[idx[k]]) {
                rank_sum += avg;
                ++pos;
            }
        i = j;
    }
    const long neg = static_cast<long>(s.size()) - pos;
    if (pos == 0 || neg == 0) throw ArgumentError("rank_auc: need both populations");
    return (rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1)) /
           (static_cast<double>(pos) * static_cast<double>(neg));
}

/// AUC by trapezoidal integration of the ROC swept over distinct score thresholds.
inline double trapezoid_auc(std::span<const double> s, std::span<const int> member) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    long pos = 0;
    for (int m : member) pos += m ? 1 : 0;
    const long neg = static_cast<long>(s.size()) - pos;
    if (pos == 0 || neg == 0) throw ArgumentError("trapezoid_auc: need both populations");
    double area = 0, tpr = 0, fpr = 0;
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && s[idx[j]] == s[idx[i]]) {
            (member[idx[j]] ? tp : fp)++;
            ++j;
        }
        const double t2 = static_cast<double>(tp) / pos, f2 = static_cast<double>(fp) / neg;
        area += (f2 - fpr) * 0.5 * (tpr + t2);
        tpr = t2;
        fpr = f2;
        i = j;
    }
    return area;
}

struct AttackSamples {
    std::vector<EmbeddingVector> embeddings;
    std::vector<int> labels;  // model classes for members; ignored for non-members
    std::vector<std::string> ids;
};

/// Score both populations against unit class weights [K,d].
inline AttackReport run_attack(std::span<const double> class_weights, const MarginHeadConfig& head,
                               const AttackSamples& members, const AttackSamples& nonmembers,
                               AttackVariant variant = AttackVariant::Margin, int bins = 20) {
    head.validate();
    if (members.embeddings.empty() || nonmembers.embeddings.empty())
        throw ArgumentError("run_attack: member and non-member sets must be non-empty");
    if (members.labels.size() != members.embeddings.size()) throw ArgumentError("run_attack: every member needs a label");
    AttackReport r;
    r.variant = variant;
    r.n_classes = head.n_classes;
    const bool margin = variant == AttackVariant::Margin;
    auto id_of = [](const AttackSamples& s, std::size_t i, const char* prefix) {
        return i < s.ids.size() ? s.ids[i] : std::string(prefix) + std::to_string(i);
    };
    for (std::size_t i = 0; i < members.embeddings.size(); ++i)
        r.records.push_back({id_of(members, i, "member_"), true,
                             prediction_entropy(members.embeddings[i].e, class_weights, members.labels[i], head, margin)});
    for (std::size_t i = 0; i < nonmembers.embeddings.size(); ++i) {
        const auto& e = nonmembers.embeddings[i].e;
        const int c = nearest_class(e, class_weights, head.n_classes);
        r.records.push_back({id_of(nonmembers, i, "nonmember_"), false, prediction_entropy(e, class_weights, c, head, margin)});
    }
    std::sort(r.records.begin(), r.records.end(), [](const EntropyRecord& a, const EntropyRecord& b) {
        return a.entropy != b.entropy ? a.entropy < b.entropy : a.id < b.id;
    });

    const std::size_t half = (r.records.size() + 1) / 2;
    long low_members = 0;
    for (std::size_t i = 0; i < half; ++i) low_members += r.records[i].member ? 1 : 0;
    r.member_fraction = static_cast<double>(low_members) / static_cast<double>(half);

    std::vector<double> score;
    std::vector<int> is_member;
    for (const auto& rec : r.records) {
        score.push_back(-rec.entropy);
        is_member.push_back(rec.member ? 1 : 0);
    }
    r.auc = rank_auc(score, is_member);
    r.auc_trapezoid = trapezoid_auc(score, is_member);

    r.histogram.lo = 0;
    r.histogram.hi = std::log(static_cast<double>(head.n_classes));
    r.histogram.members.assign(static_cast<std::size_t>(bins), 0);
    r.histogram.nonmembers.assign(static_cast<std::size_t>(bins), 0);
    for (const auto& rec : r.records) {
        const double span = r.histogram.hi > 0 ? r.histogram.hi : 1.0;
        const int b = std::clamp(static_cast<int>(rec.entropy / span * bins), 0, bins - 1);
        (rec.member ? r.histogram.members : r.histogram.nonmembers)[static_cast<std::size_t>(b)]++;
    }
    return r;
}

/// Embed images with the classifier's backbone and attack it.
inline AttackReport run_attack(const MarginClassifier& model, const ImageBatch& member_images,
                               const std::vector<int>& member_labels, const ImageBatch& nonmember_images,
                               AttackVariant variant = AttackVariant::Margin,
                               const std::vector<std::string>& member_ids = {},
                               const std::vector<std::string>& nonmember_ids = {}) {
    AttackSamples m{model.embedder().embed(member_images), member_labels, member_ids};
    AttackSamples n{model.embedder().embed(nonmember_images), {}, nonmember_ids};
    const auto w = model.class_weights();
    return run_attack(w, model.head(), m, n, variant);
}

} // namespace synthid
