#pragma once

// Fréchet distance between Gaussian fits of dataset features, and the
// pairwise dataset distance matrix in two feature spaces.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "synthid/aux_models.hpp"
#include "synthid/dataset_gen.hpp"

namespace synthid {

struct GaussianFit {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    long n = 0;

    int dim() const { return static_cast<int>(mu.size()); }
    bool rank_deficient() const { return n < dim() + 1; }
};

/// Mean and unbiased covariance of the rows of `features` [n,d].
inline GaussianFit fit_gaussian(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw ArgumentError("fit_gaussian: need at least 2 rows, got " + std::to_string(features.rows()));
    GaussianFit g;
    g.n = features.rows();
    g.mu = features.colwise().mean().transpose();
    const Eigen::MatrixXd c = features.rowwise() - g.mu.transpose();
    g.sigma = (c.transpose() * c) / static_cast<double>(g.n - 1);
    g.sigma = 0.5 * (g.sigma + g.sigma.transpose());
    return g;
}

namespace detail {

// Symmetric PSD square root; negative eigenvalues from round-off are zeroed.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
    if (es.info() != Eigen::Success) throw NumericFault("eigendecomposition did not converge");
    const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

inline bool has_null_direction(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
    const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    return es.eigenvalues().minCoeff() <= 1e-12 * top;
}

} // namespace detail

/// Principal square root of (A + eps I)(B + eps I) for symmetric PSD A, B with A + eps I invertible.
/// Computed as A' ^{1/2} (A'^{1/2} B' A'^{1/2})^{1/2} A'^{-1/2}; the result is checked by squaring.
inline Eigen::MatrixXd sqrtm_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps = 1e-6) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != a.cols())
        throw ArgumentError("sqrtm_product: shape mismatch");
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
    const Eigen::MatrixXd as = a + eps * id, bs = b + eps * id;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (as + as.transpose()));
    if (es.info() != Eigen::Success) throw NumericFault("sqrtm_product: eigendecomposition did not converge");
    const Eigen::VectorXd ev = es.eigenvalues();
    if (ev.minCoeff() <= 0) throw NumericFault("sqrtm_product: first operand is singular; raise eps");
    const Eigen::MatrixXd& v = es.eigenvectors();
    const Eigen::MatrixXd ah = v * ev.cwiseSqrt().asDiagonal() * v.transpose();
    const Eigen::MatrixXd aih = v * ev.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
    const Eigen::MatrixXd root = ah * detail::sqrt_psd(ah * bs * ah) * aih;
    const Eigen::MatrixXd prod = as * bs;
    const double rel = (root * root - prod).norm() / std::max(prod.norm(), 1e-300);
    if (!(rel <= 1e-6)) throw NumericFault("sqrtm_product: residual " + std::to_string(rel) + " exceeds 1e-6");
    return root;
}

struct FrechetResult {
    double distance2 = 0;
    std::string a, b;
    std::string space;
    double eps = 0;

    nlohmann::ordered_json to_json() const {
        return {{"a", a}, {"b", b}, {"space", space}, {"distance2", distance2}, {"eps", eps}};
    }
};

/// eps < 0 picks 0, or 1e-6 when either covariance has a null direction.
inline FrechetResult frechet_distance(const GaussianFit& a, const GaussianFit& b, double eps = -1) {
    if (a.dim() != b.dim() || a.sigma.rows() != a.dim() || b.sigma.rows() != b.dim())
        throw ArgumentError("frechet_distance: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                            std::to_string(b.dim()) + ")");
    if (eps < 0) eps = (detail::has_null_direction(a.sigma) || detail::has_null_direction(b.sigma)) ? 1e-6 : 0.0;
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.dim(), a.dim());
    const Eigen::MatrixXd sa = a.sigma + eps * id, sb = b.sigma + eps * id;
    // Tr((Sa Sb)^{1/2}) = Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), whose operand is symmetric PSD.
    const Eigen::MatrixXd ah = detail::sqrt_psd(sa);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (ah * sb * ah + (ah * sb * ah).transpose()),
                                                      Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericFault("frechet_distance: eigendecomposition did not converge");
    const double tr_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double d2 = (a.mu - b.mu).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_root;
    if (d2 < 0) {
        if (d2 < -1e-6) throw NumericFault("frechet_distance: negative result " + std::to_string(d2));
        d2 = 0;
    }
    FrechetResult r;
    r.distance2 = d2;
    r.eps = eps;
    return r;
}

// ------------------------------------------------------------ feature spaces

class FeatureSpace {
public:
    virtual ~FeatureSpace() = default;
    virtual std::string name() const = 0;
    virtual Eigen::MatrixXd features(const ImageBatch& images) const = 0;
};

/// Identity-embedding space: any embedding provider.
class IdentitySpace final : public FeatureSpace {
public:
    explicit IdentitySpace(std::shared_ptr<const EmbeddingProvider> e) : emb_(std::move(e)) {}
    std::string name() const override { return "identity:" + emb_->name(); }
    Eigen::MatrixXd features(const ImageBatch& images) const override {
        const auto es = emb_->embed(images);
        Eigen::MatrixXd f(static_cast<Eigen::Index>(es.size()), emb_->dim());
        for (std::size_t i = 0; i < es.size(); ++i)
            for (int k = 0; k < emb_->dim(); ++k) f(static_cast<Eigen::Index>(i), k) = es[i].e[static_cast<std::size_t>(k)];
        return f;
    }

private:
    std::shared_ptr<const EmbeddingProvider> emb_;
};

/// Classes used to train the generic net: hue x roll sign x horizontal half.
inline int generic_class(const OracleFactors& f) {
    return f.identity.hue * 4 + (f.pose.roll >= 0 ? 2 : 0) + (f.pose.tx >= 0 ? 1 : 0);
}

/// Small classifier over oracle renders; its penultimate activations are the generic space.
class GenericFeatureNet final : public FeatureSpace {
public:
    GenericFeatureNet(ToyCnnConfig cfg, int n_classes, std::uint64_t seed)
        : net_(std::move(cfg), seed), n_classes_(n_classes) {
        Rng rng(derive_seed(seed, 0xc1a55));
        head_ = nn::Linear<float>(head_params_, "head", net_.config().out_dim, n_classes_, rng);
    }

    std::string name() const override { return "generic"; }

    Var<float> penultimate(const Var<float>& images) const { return ag::leaky_relu(net_.forward(images), nn::kLeakySlope); }
    Var<float> logits(const Var<float>& images) const { return head_(penultimate(images)); }

    Eigen::MatrixXd features(const ImageBatch& images) const override {
        const int n = images.batch(), d = net_.config().out_dim;
        Eigen::MatrixXd f(n, d);
        for (int s = 0; s < n; s += 64) {
            const int e = std::min(n, s + 64);
            const auto h = penultimate(Var<float>::constant(images.pixels.rows(s, e))).value();
            for (int i = s; i < e; ++i)
                for (int k = 0; k < d; ++k) f(i, k) = h[(i - s) * d + k];
        }
        return f;
    }

    std::vector<Var<float>> params() const {
        auto p = net_.params().vars();
        for (const auto& v : head_params_.vars()) p.push_back(v);
        return p;
    }

    void save(const std::filesystem::path& path) const {
        Archive a;
        a.meta["provider"] = "toy-cnn";
        a.meta["kind"] = "generic-features";
        a.meta["config"] = net_.config().to_json();
        a.meta["n_classes"] = n_classes_;
        net_.save_to(a, "backbone.");
        for (const auto& [n, v] : head_params_.items()) a.put("head." + n, v.value());
        a.save(path);
    }

    static GenericFeatureNet load(const std::filesystem::path& path) {
        const auto a = Archive::load(path);
        if (a.meta.value("kind", "") != "generic-features")
            throw ConfigError(path.string() + " is not a generic feature checkpoint");
        GenericFeatureNet g(ToyCnnConfig::from_json(a.meta.at("config")), a.meta.at("n_classes").get<int>(), 0);
        g.net_.load_from(a, "backbone.");
        for (auto& [n, v] : g.head_params_.items()) v.mutable_value() = a.get_f4("head." + n);
        return g;
    }

private:
    ToyCnn net_;
    int n_classes_;
    nn::ParamSet<float> head_params_;
    nn::Linear<float> head_;
};

inline GenericFeatureNet train_generic_feature_net(const OracleWorldSpec& world, int steps = 400, int batch = 32,
                                                   std::uint64_t seed = 0, ToyCnnConfig cfg = {}) {
    cfg.resolution = world.resolution;
    GenericFeatureNet net(cfg, world.n_hues * 4, seed);
    nn::Adam<float> opt(net.params(), {.lr = 1e-3, .beta1 = 0.9, .beta2 = 0.999});
    for (int step = 0; step < steps; ++step) {
        Rng rng(derive_seed(seed, 0x6e4e, static_cast<std::uint64_t>(step)));
        std::vector<OracleFactors> fs(static_cast<std::size_t>(batch));
        std::vector<int> labels(static_cast<std::size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            fs[i].identity = world.identity(rng.index(world.identity_count()));
            fs[i].pose = world.sample_pose(rng);
            labels[i] = generic_class(fs[i]);
        }
        const auto imgs = render_oracle(fs, world);
        opt.zero_grad();
        ag::backward(ag::cross_entropy(net.logits(Var<float>::constant(imgs.pixels)), labels));
        opt.step();
    }
    return net;
}

// ------------------------------------------------------------ matrix report

struct DistanceMatrix {
    std::string space;
    std::vector<std::string> names;
    std::vector<long> counts;
    std::vector<std::vector<double>> d2;  // NaN on the diagonal
    std::vector<FrechetResult> pairs;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"space", space}, {"datasets", names}, {"counts", counts}};
        auto& m = j["matrix"] = nlohmann::ordered_json::array();
        for (const auto& row : d2) {
            auto r = nlohmann::ordered_json::array();
            for (double v : row) r.push_back(std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v));
            m.push_back(r);
        }
        auto& p = j["pairs"] = nlohmann::ordered_json::array();
        for (const auto& r : pairs) p.push_back(r.to_json());
        return j;
    }
};

inline DistanceMatrix distance_matrix(const std::vector<std::string>& names, const std::vector<Eigen::MatrixXd>& feats,
                                      const std::string& space) {
    if (names.size() < 2 || names.size() != feats.size()) throw ArgumentError("distance_matrix: need at least 2 datasets");
    DistanceMatrix m;
    m.space = space;
    m.names = names;
    std::vector<GaussianFit> fits;
    for (const auto& f : feats) {
        fits.push_back(fit_gaussian(f));
        m.counts.push_back(fits.back().n);
    }
    const std::size_t n = names.size();
    m.d2.assign(n, std::vector<double>(n, std::nan("")));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            auto r = frechet_distance(fits[i], fits[j]);
            r.a = names[i];
            r.b = names[j];
            r.space = space;
            m.d2[i][j] = m.d2[j][i] = r.distance2;
            m.pairs.push_back(r);
        }
    return m;
}

/// Seeded subset of `count` images, original order kept; all of them when count <= 0 or >= batch.
inline ImageBatch subsample(const ImageBatch& images, int count, std::uint64_t seed) {
    const int n = images.batch();
    if (count <= 0 || count >= n) return images;
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x5b));
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    ImageBatch out;
    Shape shp = images.pixels.shape;
    shp[0] = count;
    out.pixels = Tensor<float>(shp);
    const std::size_t per = images.pixels.size() / static_cast<std::size_t>(n);
    for (int i = 0; i < count; ++i)
        std::copy_n(images.pixels.ptr() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * per, per,
                    out.pixels.ptr() + static_cast<std::size_t>(i) * per);
    if (images.has_truth())
        for (int i : idx) out.truth.push_back(images.truth[static_cast<std::size_t>(i)]);
    return out;
}

/// One row per manifest, named after the manifest's directory.
inline DistanceMatrix distance_matrix(const std::vector<std::filesystem::path>& manifests, const FeatureSpace& space,
                                      int max_images = 0, std::uint64_t seed = 0) {
    std::vector<std::string> names;
    std::vector<Eigen::MatrixXd> feats;
    for (const auto& p : manifests) {
        names.push_back(p.parent_path().filename().string());
        feats.push_back(space.features(subsample(load_dataset(p).images, max_images, seed)));
    }
    return distance_matrix(names, feats, space.name());
}

/// Upper triangle from `upper`, lower triangle from `lower`, X on the diagonal.
inline std::string table_report(const DistanceMatrix& upper, const DistanceMatrix& lower) {
    if (upper.names != lower.names) throw ArgumentError("table_report: matrices cover different datasets");
    std::string out = "# upper: " + upper.space + "  lower: " + lower.space + "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-16s", "");
    out += buf;
    for (const auto& n : upper.names) {
        std::snprintf(buf, sizeof buf, "%14s", n.c_str());
        out += buf;
    }
    out += "\n";
    for (std::size_t i = 0; i < upper.names.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%-16s", upper.names[i].c_str());
        out += buf;
        for (std::size_t j = 0; j < upper.names.size(); ++j) {
            if (i == j)
                std::snprintf(buf, sizeof buf, "%14s", "X");
            else
                std::snprintf(buf, sizeof buf, "%14.4f", i < j ? upper.d2[i][j] : lower.d2[i][j]);
            out += buf;
        }
        out += "\n";
    }
    out += "# n:";
    for (std::size_t i = 0; i < upper.names.size(); ++i) out += " " + upper.names[i] + "=" + std::to_string(upper.counts[i]);
    return out + "\n";
}

} // namespace synthid
