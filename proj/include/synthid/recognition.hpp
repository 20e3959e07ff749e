#pragma once

// Margin-softmax recognizer training and pair-verification evaluation.
//
// Protocol file: one pair per line, "pathA pathB 0|1" (1 = same identity),
// grouped by fold in order; lines starting with '#' are comments and the
// header "# folds <n>" records the fold count. Relative paths resolve
// against the protocol file's directory.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/aux_models.hpp"
#include "synthid/dataset_gen.hpp"

namespace synthid {

// ------------------------------------------------------------------ protocol

struct VerificationPair {
    std::string a, b;
    bool same = false;
};

struct VerificationProtocol {
    std::vector<VerificationPair> pairs;
    int n_folds = 10;

    void validate() const {
        if (n_folds < 2) throw ConfigError("protocol needs at least 2 folds");
        if (pairs.size() % static_cast<std::size_t>(n_folds) != 0)
            throw ConfigError("protocol pair count is not a multiple of the fold count");
        std::set<std::pair<std::string, std::string>> seen;
        for (const auto& p : pairs)
            if (!seen.insert(std::minmax(p.a, p.b)).second) throw ConfigError("protocol repeats pair " + p.a + " " + p.b);
    }

    /// Fold index of pair i.
    int fold_of(std::size_t i) const { return static_cast<int>(i / (pairs.size() / static_cast<std::size_t>(n_folds))); }
};

struct ProtocolOptions {
    int n_folds = 10;
    int positives_per_fold = 300;
    int negatives_per_fold = 300;
    std::uint64_t seed = 0;
};

/// Balanced pairs from a manifest's images. Paths are written relative to `base`.
inline VerificationProtocol make_protocol(const std::filesystem::path& manifest_path, const ProtocolOptions& opt,
                                          const std::filesystem::path& base) {
    const auto m = read_manifest(manifest_path);
    if (m.n_identities() < 2) throw ArgumentError("make_protocol: need at least two identities");
    std::vector<int> multi;
    for (const auto& e : m.identities)
        if (e.images.size() >= 2) multi.push_back(e.label);
    if (multi.empty()) throw ArgumentError("make_protocol: no identity has two images");

    const auto root = std::filesystem::weakly_canonical(manifest_path.parent_path());
    const auto b = std::filesystem::weakly_canonical(base);
    auto rel = [&](const std::string& p) { return (root / p).lexically_normal().lexically_relative(b).generic_string(); };

    Rng rng(derive_seed(opt.seed, 6));
    VerificationProtocol proto;
    proto.n_folds = opt.n_folds;
    std::set<std::pair<std::string, std::string>> seen;
    const long budget = 1000L * (opt.positives_per_fold + opt.negatives_per_fold) * opt.n_folds + 100000;
    long tries = 0;
    auto draw = [&](bool same) {
        while (++tries < budget) {
            std::string a, c;
            if (same) {
                const auto& e = m.identities[static_cast<std::size_t>(multi[static_cast<std::size_t>(rng.index(static_cast<int>(multi.size())))])];
                const int i = rng.index(static_cast<int>(e.images.size()));
                int j = rng.index(static_cast<int>(e.images.size()) - 1);
                if (j >= i) ++j;
                a = rel(e.images[static_cast<std::size_t>(i)]);
                c = rel(e.images[static_cast<std::size_t>(j)]);
            } else {
                const int x = rng.index(m.n_identities());
                int y = rng.index(m.n_identities() - 1);
                if (y >= x) ++y;
                const auto& ex = m.identities[static_cast<std::size_t>(x)];
                const auto& ey = m.identities[static_cast<std::size_t>(y)];
                a = rel(ex.images[static_cast<std::size_t>(rng.index(static_cast<int>(ex.images.size())))]);
                c = rel(ey.images[static_cast<std::size_t>(rng.index(static_cast<int>(ey.images.size())))]);
            }
            if (seen.insert(std::minmax(a, c)).second) return VerificationPair{a, c, same};
        }
        throw ArgumentError("make_protocol: dataset too small for the requested number of distinct pairs");
    };
    for (int f = 0; f < opt.n_folds; ++f) {
        for (int i = 0; i < opt.positives_per_fold; ++i) proto.pairs.push_back(draw(true));
        for (int i = 0; i < opt.negatives_per_fold; ++i) proto.pairs.push_back(draw(false));
    }
    return proto;
}

inline void write_protocol(const VerificationProtocol& p, const std::filesystem::path& path) {
    p.validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << "# folds " << p.n_folds << '\n';
        for (const auto& q : p.pairs) out << q.a << ' ' << q.b << ' ' << (q.same ? 1 : 0) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

inline VerificationProtocol read_protocol(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open protocol " + path.string());
    VerificationProtocol p;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream hs(line.substr(1));
            std::string key;
            if (hs >> key && key == "folds" && !(hs >> p.n_folds))
                throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad fold header");
            continue;
        }
        std::istringstream ls(line);
        VerificationPair q;
        int flag = -1;
        if (!(ls >> q.a >> q.b >> flag) || (flag != 0 && flag != 1))
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'pathA pathB 0|1'");
        q.same = flag == 1;
        p.pairs.push_back(std::move(q));
    }
    p.validate();
    return p;
}

// ----------------------------------------------------------------- scoring

struct ThresholdChoice {
    double threshold = 0;
    double accuracy = 0;
};

/// Best cosine-distance threshold (same iff d <= t) over every distinct cut.
inline ThresholdChoice best_threshold(std::span<const double> dist, std::span<const int> same) {
    std::vector<std::size_t> idx(dist.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    long negatives = 0;
    for (int s : same) negatives += s ? 0 : 1;
    // Threshold below everything: all predicted different.
    long correct = negatives;
    ThresholdChoice best{dist.empty() ? 0.0 : dist[idx.front()] - 1.0, static_cast<double>(correct)};
    for (std::size_t k = 0; k < idx.size(); ++k) {
        correct += same[idx[k]] ? 1 : -1;
        if (k + 1 < idx.size() && dist[idx[k + 1]] == dist[idx[k]]) continue;
        if (correct > best.accuracy) {
            const double t = k + 1 < idx.size() ? 0.5 * (dist[idx[k]] + dist[idx[k + 1]]) : dist[idx[k]] + 1.0;
            best = {t, static_cast<double>(correct)};
        }
    }
    best.accuracy /= static_cast<double>(std::max<std::size_t>(1, dist.size()));
    return best;
}

struct RocPoint {
    double threshold, tpr, fpr;
};

struct VerificationResult {
    double accuracy = 0;
    std::vector<double> fold_accuracy;
    std::vector<double> thresholds;
    std::vector<RocPoint> roc;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"accuracy", accuracy}, {"fold_accuracy", fold_accuracy}, {"thresholds", thresholds}};
        auto& r = j["roc"] = nlohmann::ordered_json::array();
        for (const auto& p : roc) r.push_back({{"threshold", p.threshold}, {"tpr", p.tpr}, {"fpr", p.fpr}});
        return j;
    }
};

/// Fold-wise evaluation: each fold's threshold is chosen on the other folds.
inline VerificationResult score_verification(std::span<const double> dist, std::span<const int> same, int n_folds) {
    if (dist.size() != same.size() || dist.empty() || n_folds < 2 || dist.size() % static_cast<std::size_t>(n_folds))
        throw ArgumentError("score_verification: inconsistent inputs");
    const std::size_t per = dist.size() / static_cast<std::size_t>(n_folds);
    VerificationResult r;
    for (int f = 0; f < n_folds; ++f) {
        std::vector<double> cd;
        std::vector<int> cs;
        for (std::size_t i = 0; i < dist.size(); ++i)
            if (i / per != static_cast<std::size_t>(f)) {
                cd.push_back(dist[i]);
                cs.push_back(same[i]);
            }
        const auto t = best_threshold(cd, cs).threshold;
        long correct = 0;
        for (std::size_t i = f * per; i < (f + 1) * per; ++i) correct += ((dist[i] <= t) == (same[i] != 0)) ? 1 : 0;
        r.thresholds.push_back(t);
        r.fold_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(per));
    }
    r.accuracy = std::accumulate(r.fold_accuracy.begin(), r.fold_accuracy.end(), 0.0) / n_folds;

    std::vector<double> cuts(dist.begin(), dist.end());
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    long pos = 0, neg = 0;
    for (int s : same) (s ? pos : neg)++;
    for (double t : cuts) {
        long tp = 0, fp = 0;
        for (std::size_t i = 0; i < dist.size(); ++i)
            if (dist[i] <= t) (same[i] ? tp : fp)++;
        r.roc.push_back({t, pos ? static_cast<double>(tp) / pos : 0.0, neg ? static_cast<double>(fp) / neg : 0.0});
    }
    return r;
}

inline double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b) { return 1.0 - a.dot(b); }

/// Embed every protocol image once, then score all pairs.
inline VerificationResult evaluate_verification(const EmbeddingProvider& embedder, const VerificationProtocol& protocol,
                                                const std::filesystem::path& base) {
    protocol.validate();
    std::map<std::string, std::size_t> index;
    std::vector<std::string> order;
    for (const auto& p : protocol.pairs)
        for (const auto* s : {&p.a, &p.b})
            if (index.emplace(*s, order.size()).second) order.push_back(*s);
    const int r = embedder.resolution();
    ImageBatch batch;
    batch.pixels = Tensor<float>({static_cast<int>(order.size()), 3, r, r});
    const std::size_t per = static_cast<std::size_t>(3) * r * r;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::filesystem::path p(order[i]);
        const auto full = p.is_absolute() ? p : base / p;
        Tensor<float> img;
        try {
            img = read_png(full);
        } catch (const std::exception& e) {
            throw IoError("cannot read protocol image " + full.string() + ": " + e.what());
        }
        if (img.size() != per) throw ConfigError("protocol image " + full.string() + " has the wrong size");
        std::copy(img.data.begin(), img.data.end(), batch.pixels.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    const auto emb = embedder.embed(batch);
    std::vector<double> dist;
    std::vector<int> same;
    for (const auto& p : protocol.pairs) {
        dist.push_back(cosine_distance(emb[index[p.a]], emb[index[p.b]]));
        same.push_back(p.same ? 1 : 0);
    }
    return score_verification(dist, same, protocol.n_folds);
}

// ---------------------------------------------------------------- training

struct RecognizerTrainConfig {
    int max_epochs = 50;
    int patience = 10;  // epochs without validation improvement
    int batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    int max_steps = 0;  // 0 = no step limit
    ToyCnnConfig net;

    void validate() const {
        if (max_epochs < 1 || patience < 1 || batch_size < 1) throw ConfigError("recognizer: epochs, patience and batch must be >= 1");
        if (!(lr > 0)) throw ConfigError("recognizer: learning rate must be positive");
    }
};

struct EpochLog {
    int epoch = 0;
    long steps = 0;
    double loss = 0;
    std::optional<double> validation_accuracy;
};

struct RecognizerTrainResult {
    std::vector<EpochLog> epochs;
    int best_epoch = 0;
    std::optional<double> best_validation;
    double final_loss = 0;
};

/// Train the margin classifier on in-memory data. With a validation callback
/// the best-scoring weights are kept and training stops after `patience`
/// epochs without improvement; otherwise training loss drives the patience.
inline RecognizerTrainResult train_recognizer(MarginClassifier& model, const LabelledImages& data,
                                              const RecognizerTrainConfig& cfg,
                                              const std::function<double(const EmbeddingProvider&)>& validate = {}) {
    cfg.validate();
    const int n = data.images.batch();
    if (n == 0) throw ArgumentError("train_recognizer: empty dataset");
    std::vector<Var<float>> params = model.embedder().net().params().vars();
    for (const auto& v : model.head_params().vars()) params.push_back(v);
    nn::Adam<float> opt(params, {cfg.lr, 0.9, 0.999, 1e-8});

    RecognizerTrainResult res;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<Tensor<float>> best_weights;
    int since = 0;
    long steps = 0;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per = data.images.pixels.size() / static_cast<std::size_t>(n);
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, 7, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng.engine());
        double loss_sum = 0;
        int batches = 0;
        for (int s = 0; s < n; s += cfg.batch_size) {
            if (cfg.max_steps && steps >= cfg.max_steps) break;
            const int e = std::min(n, s + cfg.batch_size);
            Shape shp = data.images.pixels.shape;
            shp[0] = e - s;
            Tensor<float> x(shp);
            std::vector<int> y;
            for (int i = s; i < e; ++i) {
                const int src = order[static_cast<std::size_t>(i)];
                std::copy_n(data.images.pixels.ptr() + src * per, per, x.ptr() + (i - s) * per);
                y.push_back(data.labels[static_cast<std::size_t>(src)]);
            }
            opt.zero_grad();
            const auto loss = ag::cross_entropy(model.logits(Var<float>::constant(std::move(x)), y), y);
            ag::backward(loss);
            opt.step();
            ++steps;
            loss_sum += loss.item();
            ++batches;
        }
        EpochLog log{epoch, steps, batches ? loss_sum / batches : 0.0, std::nullopt};
        const double score = validate ? validate(model.embedder()) : -log.loss;
        if (validate) log.validation_accuracy = score;
        res.epochs.push_back(log);
        res.final_loss = log.loss;
        if (score > best) {
            best = score;
            res.best_epoch = epoch;
            if (validate) res.best_validation = score;
            best_weights.clear();
            for (const auto& p : params) best_weights.push_back(p.value());
            since = 0;
        } else if (++since >= cfg.patience) {
            break;
        }
        if (cfg.max_steps && steps >= cfg.max_steps) break;
    }
    if (validate)
        for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = best_weights[i];
    return res;
}

/// Convenience wrapper: train from a manifest and write the checkpoint.
inline RecognizerTrainResult train_recognizer(const std::filesystem::path& manifest, const MarginHeadConfig& head_in,
                                              const RecognizerTrainConfig& cfg, const std::filesystem::path& checkpoint,
                                              const std::optional<std::filesystem::path>& validation_protocol = std::nullopt) {
    const auto data = load_dataset(manifest);
    const auto m = read_manifest(manifest);
    if (m.n_identities() < 2) throw ArgumentError("train_recognizer: need at least two identities");
    MarginHeadConfig head = head_in;
    head.n_classes = m.n_identities();
    ToyCnnConfig net = cfg.net;
    net.resolution = m.resolution;
    net.channels = m.channels;
    MarginClassifier model(net, head, cfg.seed);
    std::function<double(const EmbeddingProvider&)> val;
    std::optional<VerificationProtocol> proto;
    if (validation_protocol) {
        proto = read_protocol(*validation_protocol);
        const auto base = validation_protocol->parent_path();
        val = [&proto, base](const EmbeddingProvider& e) { return evaluate_verification(e, *proto, base).accuracy; };
    }
    auto res = train_recognizer(model, data, cfg, val);
    model.save(checkpoint);
    return res;
}

} // namespace synthid
