#pragma once

// Identity-embedding (F) and pose (P) providers, and the angular-margin head.
//
// Two provider families are available by name:
//   "oracle"  - analytic moment readout of the procedural world; no weights,
//               differentiable in the pixels, and exact (factor readback) on
//               renders that carry their generating factors.
//               "oracle-decoded" snaps unlabelled images to the nearest
//               world identity (embedding only, not differentiable).
//   "toy-cnn" - small strided CNN trained on oracle renders.

#include <filesystem>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "synthid/archive.hpp"
#include "synthid/nn.hpp"
#include "synthid/oracle_world.hpp"

namespace synthid {

using ag::Var;

// ------------------------------------------------------------- margin head

struct MarginHeadConfig {
    double s = 64.0;  // feature scale
    double m = 0.5;   // additive angular margin (rad)
    int n_classes = 0;

    void validate() const {
        if (!(s > 0.0)) throw ArgumentError("margin head: feature scale must be positive");
        if (!(m >= 0.0 && m < std::numbers::pi / 2)) throw ArgumentError("margin head: margin must lie in [0, pi/2)");
        if (n_classes < 1) throw ArgumentError("margin head: need at least one class");
    }
};

/// Logits s*cos(theta_j) with the margin added to the labelled class's angle.
/// `class_weights` is row-major [n_classes, d]; e and rows are unit vectors.
inline std::vector<double> angular_logits(std::span<const double> e, std::span<const double> class_weights, int label,
                                          const MarginHeadConfig& cfg, bool apply_margin = true) {
    cfg.validate();
    const std::size_t d = e.size();
    if (label < 0 || label >= cfg.n_classes)
        throw ArgumentError("angular_logits: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(cfg.n_classes) + ")");
    if (class_weights.size() != d * static_cast<std::size_t>(cfg.n_classes))
        throw ConfigError("angular_logits: class weight matrix does not match embedding dimension");
    std::vector<double> out(static_cast<std::size_t>(cfg.n_classes));
    for (int j = 0; j < cfg.n_classes; ++j) {
        double c = 0.0;
        for (std::size_t k = 0; k < d; ++k) c += e[k] * class_weights[static_cast<std::size_t>(j) * d + k];
        const double theta = std::acos(std::clamp(c, -1.0, 1.0));
        out[static_cast<std::size_t>(j)] = cfg.s * std::cos(theta + ((apply_margin && j == label) ? cfg.m : 0.0));
    }
    return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
    for (auto& v : p) v /= z;
    return p;
}

// ---------------------------------------------------------------- providers

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string name() const = 0;
    virtual int dim() const = 0;
    virtual int resolution() const = 0;
    /// Differentiable path: [B,C,H,W] -> unit rows [B,dim].
    virtual Var<float> forward(const Var<float>& images) const = 0;
    /// Checksum of any weights (0 for weightless providers).
    virtual double checksum() const { return 0.0; }

    /// Inference over a batch, chunked, without recording gradients.
    virtual std::vector<EmbeddingVector> embed(const ImageBatch& images) const {
        check_resolution(images);
        std::vector<EmbeddingVector> out;
        constexpr int kChunk = 64;
        for (int b = 0; b < images.batch(); b += kChunk) {
            const int e = std::min(images.batch(), b + kChunk);
            const auto y = forward(Var<float>::constant(images.pixels.rows(b, e)));
            const int d = y.dim(1);
            for (int i = 0; i < e - b; ++i) {
                EmbeddingVector v;
                v.e.assign(y.value().ptr() + i * d, y.value().ptr() + (i + 1) * d);
                out.push_back(std::move(v));
            }
        }
        return out;
    }

protected:
    void check_resolution(const ImageBatch& images) const {
        if (images.batch() && (images.height() != resolution() || images.width() != resolution()))
            throw ConfigError(name() + " embedder expects " + std::to_string(resolution()) + "px images, got " +
                              std::to_string(images.height()) + "x" + std::to_string(images.width()));
    }
};

class PoseProvider {
public:
    virtual ~PoseProvider() = default;
    virtual std::string name() const = 0;
    virtual int resolution() const = 0;
    /// Differentiable path: [B,C,H,W] -> [B,3].
    virtual Var<float> forward(const Var<float>& images) const = 0;
    virtual double checksum() const { return 0.0; }

    virtual std::vector<PoseVector> estimate_pose(const ImageBatch& images) const {
        check_resolution(images);
        std::vector<PoseVector> out;
        constexpr int kChunk = 64;
        for (int b = 0; b < images.batch(); b += kChunk) {
            const int e = std::min(images.batch(), b + kChunk);
            const auto y = forward(Var<float>::constant(images.pixels.rows(b, e)));
            for (int i = 0; i < e - b; ++i) out.push_back({y.value()[i * 3], y.value()[i * 3 + 1], y.value()[i * 3 + 2]});
        }
        return out;
    }

protected:
    void check_resolution(const ImageBatch& images) const {
        if (images.batch() && (images.height() != resolution() || images.width() != resolution()))
            throw ConfigError(name() + " pose estimator expects " + std::to_string(resolution()) + "px images");
    }
};

/// Identity embedding from the moment readout: features are standardized
/// against canonical renders of every identity, a constant coordinate is
/// appended, and the result is normalized.
///
/// Readout::Decoded maps each image to the nearest canonical identity and
/// returns its one-hot indicator, so different identities are orthogonal and
/// pose has no effect once decoding is right. Not differentiable.
class OracleEmbedder final : public EmbeddingProvider {
public:
    static constexpr float kBias = 1.5f;
    enum class Readout { Continuous, Decoded };

    explicit OracleEmbedder(OracleWorldSpec spec, Readout mode = Readout::Continuous)
        : spec_(std::move(spec)), mode_(mode), offset_({kOracleFeatures}), inv_std_({kOracleFeatures}) {
        const int n = spec_.identity_count();
        std::vector<OracleFactors> canon(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) canon[static_cast<std::size_t>(i)].identity = spec_.identity(i);
        const auto batch = render_oracle(canon, spec_);
        const auto feats = oracle_moments(Var<float>::constant(batch.pixels), spec_).features.value();
        for (int k = 0; k < kOracleFeatures; ++k) {
            double s = 0.0, ss = 0.0;
            for (int i = 0; i < n; ++i) s += feats[i * kOracleFeatures + k];
            const double mu = s / n;
            for (int i = 0; i < n; ++i) ss += (feats[i * kOracleFeatures + k] - mu) * (feats[i * kOracleFeatures + k] - mu);
            const double sd = std::sqrt(ss / std::max(1, n - 1)) + 1e-6;
            inv_std_[k] = static_cast<float>(1.0 / sd);
            offset_[k] = static_cast<float>(-mu / sd);
        }
        const auto e = finish(Var<float>::constant(feats));
        canonical_.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            canonical_[static_cast<std::size_t>(i)].e.assign(e.value().ptr() + i * kMomentDim,
                                                             e.value().ptr() + (i + 1) * kMomentDim);
    }

    std::string name() const override { return "oracle"; }
    int dim() const override { return mode_ == Readout::Decoded ? spec_.identity_count() : kMomentDim; }
    int resolution() const override { return spec_.resolution; }
    const OracleWorldSpec& world() const noexcept { return spec_; }
    Readout mode() const noexcept { return mode_; }

    Var<float> forward(const Var<float>& images) const override {
        auto e = finish(oracle_moments(images, spec_).features);
        if (mode_ == Readout::Continuous) return e;
        const int n = images.dim(0), d = dim();
        Tensor<float> hot({n, d}, 0.0f);
        for (int i = 0; i < n; ++i) {
            EmbeddingVector v;
            v.e.assign(e.value().ptr() + i * kMomentDim, e.value().ptr() + (i + 1) * kMomentDim);
            hot[static_cast<std::size_t>(i) * d + nearest_identity(v)] = 1.0f;
        }
        return Var<float>::constant(std::move(hot));
    }

    /// Renders that carry factors read back their identity exactly.
    std::vector<EmbeddingVector> embed(const ImageBatch& images) const override {
        check_resolution(images);
        if (!images.has_truth()) return EmbeddingProvider::embed(images);
        std::vector<EmbeddingVector> out;
        for (const auto& f : images.truth) {
            if (mode_ == Readout::Continuous) {
                out.push_back(identity_embedding(f.identity));
            } else {
                EmbeddingVector v;
                v.e.assign(static_cast<std::size_t>(dim()), 0.0);
                v.e[static_cast<std::size_t>(spec_.index_of(f.identity))] = 1.0;
                out.push_back(std::move(v));
            }
        }
        return out;
    }

    /// Continuous embedding of the canonical render.
    const EmbeddingVector& identity_embedding(const IdentityFactors& id) const {
        return canonical_.at(static_cast<std::size_t>(spec_.index_of(id)));
    }

    /// World index whose canonical embedding is closest to a continuous embedding.
    int nearest_identity(const EmbeddingVector& v) const {
        int best = 0;
        double best_dot = -2.0;
        for (std::size_t i = 0; i < canonical_.size(); ++i)
            if (const double d = canonical_[i].dot(v); d > best_dot) {
                best_dot = d;
                best = static_cast<int>(i);
            }
        return best;
    }

private:
    static constexpr int kMomentDim = kOracleFeatures + 1;

    OracleWorldSpec spec_;
    Readout mode_;
    Tensor<float> offset_, inv_std_;
    std::vector<EmbeddingVector> canonical_;

    Var<float> finish(const Var<float>& feats) const {
        const int n = feats.dim(0);
        Tensor<float> off({n, kOracleFeatures});
        for (int i = 0; i < n; ++i) std::copy(offset_.data.begin(), offset_.data.end(), off.data.begin() + i * kOracleFeatures);
        const auto z = ag::add(ag::mul_rowvec(feats, Var<float>::constant(inv_std_)), Var<float>::constant(std::move(off)));
        return ag::l2_normalize_rows(ag::concat_cols(z, Var<float>::constant(Tensor<float>({n, 1}, kBias))));
    }
};

class OraclePoseEstimator final : public PoseProvider {
public:
    explicit OraclePoseEstimator(OracleWorldSpec spec) : spec_(std::move(spec)) {}

    std::string name() const override { return "oracle"; }
    int resolution() const override { return spec_.resolution; }

    Var<float> forward(const Var<float>& images) const override { return oracle_moments(images, spec_).pose; }

    std::vector<PoseVector> estimate_pose(const ImageBatch& images) const override {
        check_resolution(images);
        if (!images.has_truth()) return PoseProvider::estimate_pose(images);
        std::vector<PoseVector> out;
        for (const auto& f : images.truth) out.push_back({f.pose.tx, f.pose.ty, f.pose.roll});
        return out;
    }

private:
    OracleWorldSpec spec_;
};

// ------------------------------------------------------------------ toy CNN

struct ToyCnnConfig {
    int resolution = 32;
    int channels = 3;
    std::vector<int> conv_channels{16, 32, 64};
    int out_dim = 32;

    nlohmann::ordered_json to_json() const {
        return {{"resolution", resolution}, {"channels", channels}, {"conv_channels", conv_channels}, {"out_dim", out_dim}};
    }
    static ToyCnnConfig from_json(const nlohmann::ordered_json& j) {
        ToyCnnConfig c;
        c.resolution = j.at("resolution").get<int>();
        c.channels = j.at("channels").get<int>();
        c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
        c.out_dim = j.at("out_dim").get<int>();
        return c;
    }
};

/// Stride-2 3x3 convolutions with leaky ReLU, then a linear projection.
class ToyCnn {
public:
    ToyCnn(ToyCnnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        int spatial = cfg_.resolution;
        for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
            if (spatial % 2 != 0) throw ConfigError("toy CNN: resolution not divisible by 2^layers");
            spatial /= 2;
        }
        Rng rng(seed);
        int in = cfg_.channels;
        for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
            convs_.emplace_back(params_, "conv" + std::to_string(i), in, cfg_.conv_channels[i], 3, 2, 1, rng,
                                nn::kLeakyGain);
            in = cfg_.conv_channels[i];
        }
        flat_ = in * spatial * spatial;
        proj_ = nn::Linear<float>(params_, "proj", flat_, cfg_.out_dim, rng);
    }

    Var<float> forward(const Var<float>& images) const {
        if (images.shape().size() != 4 || images.dim(1) != cfg_.channels || images.dim(2) != cfg_.resolution ||
            images.dim(3) != cfg_.resolution)
            throw ConfigError("toy CNN expects [B," + std::to_string(cfg_.channels) + "," +
                              std::to_string(cfg_.resolution) + "," + std::to_string(cfg_.resolution) + "], got " +
                              shape_str(images.shape()));
        Var<float> h = images;
        for (const auto& c : convs_) h = ag::leaky_relu(c(h), nn::kLeakySlope);
        return proj_(ag::reshape(h, {images.dim(0), flat_}));
    }

    const ToyCnnConfig& config() const noexcept { return cfg_; }
    nn::ParamSet<float>& params() noexcept { return params_; }
    const nn::ParamSet<float>& params() const noexcept { return params_; }

    void save_to(Archive& a, const std::string& prefix) const {
        for (const auto& [n, v] : params_.items()) a.put(prefix + n, v.value());
    }
    void load_from(const Archive& a, const std::string& prefix) {
        for (auto& [n, v] : params_.items()) {
            auto t = a.get_f4(prefix + n);
            if (t.shape != v.shape()) throw ConfigError("checkpoint tensor " + prefix + n + " has wrong shape");
            v.mutable_value() = std::move(t);
        }
    }

private:
    ToyCnnConfig cfg_;
    nn::ParamSet<float> params_;
    std::vector<nn::Conv2d<float>> convs_;
    nn::Linear<float> proj_;
    int flat_ = 0;
};

class ToyCnnEmbedder final : public EmbeddingProvider {
public:
    ToyCnnEmbedder(ToyCnnConfig cfg, std::uint64_t seed) : net_(std::move(cfg), seed) {}

    std::string name() const override { return "toy-cnn"; }
    int dim() const override { return net_.config().out_dim; }
    int resolution() const override { return net_.config().resolution; }
    Var<float> forward(const Var<float>& images) const override { return ag::l2_normalize_rows(net_.forward(images)); }
    double checksum() const override { return net_.params().checksum(); }

    ToyCnn& net() noexcept { return net_; }
    const ToyCnn& net() const noexcept { return net_; }

private:
    ToyCnn net_;
};

class ToyPoseNet final : public PoseProvider {
public:
    ToyPoseNet(ToyCnnConfig cfg, std::uint64_t seed) : net_(with_pose_output(std::move(cfg)), seed) {}

    std::string name() const override { return "toy-cnn"; }
    int resolution() const override { return net_.config().resolution; }
    Var<float> forward(const Var<float>& images) const override { return net_.forward(images); }
    double checksum() const override { return net_.params().checksum(); }

    ToyCnn& net() noexcept { return net_; }
    const ToyCnn& net() const noexcept { return net_; }

private:
    ToyCnn net_;
    static ToyCnnConfig with_pose_output(ToyCnnConfig c) {
        c.out_dim = 3;
        return c;
    }
};

/// Embedder plus unit-normalized class weights: the recognizer trained with
/// the margin head, and the target of membership attacks.
class MarginClassifier {
public:
    MarginClassifier(ToyCnnConfig cfg, MarginHeadConfig head, std::uint64_t seed)
        : embedder_(std::move(cfg), seed), head_(head) {
        head_.validate();
        Rng rng(derive_seed(seed, 0x4ead));
        Tensor<float> w({head_.n_classes, embedder_.dim()});
        for (auto& v : w.data) v = static_cast<float>(rng.normal());
        weights_ = head_params_.add("class_weights", std::move(w));
    }

    const MarginHeadConfig& head() const noexcept { return head_; }
    ToyCnnEmbedder& embedder() noexcept { return embedder_; }
    const ToyCnnEmbedder& embedder() const noexcept { return embedder_; }
    nn::ParamSet<float>& head_params() noexcept { return head_params_; }

    Var<float> normalized_weights() const { return ag::l2_normalize_rows(weights_); }

    /// Class weights as unit rows, row-major [n_classes, d].
    std::vector<double> class_weights() const {
        const auto w = normalized_weights().value();
        return {w.data.begin(), w.data.end()};
    }

    /// Margin logits for training: [B,K].
    Var<float> logits(const Var<float>& images, std::span<const int> labels) const {
        const auto e = embedder_.forward(images);
        const auto cosines = ag::matmul_nt(e, normalized_weights());
        return ag::margin_logits(cosines, labels, static_cast<float>(head_.s), static_cast<float>(head_.m));
    }

    void save(const std::filesystem::path& path) const {
        Archive a;
        a.meta["provider"] = "toy-cnn";
        a.meta["kind"] = "recognizer";
        a.meta["config"] = embedder_.net().config().to_json();
        a.meta["head"] = {{"s", head_.s}, {"m", head_.m}, {"n_classes", head_.n_classes}};
        embedder_.net().save_to(a, "backbone.");
        a.put("head.class_weights", weights_.value());
        a.save(path);
    }

    static MarginClassifier load(const std::filesystem::path& path) {
        const auto a = Archive::load(path);
        if (a.meta.value("kind", "") != "recognizer")
            throw ConfigError(path.string() + " is not a recognizer checkpoint");
        MarginHeadConfig head;
        head.s = a.meta.at("head").at("s").get<double>();
        head.m = a.meta.at("head").at("m").get<double>();
        head.n_classes = a.meta.at("head").at("n_classes").get<int>();
        MarginClassifier mc(ToyCnnConfig::from_json(a.meta.at("config")), head, 0);
        mc.embedder_.net().load_from(a, "backbone.");
        mc.weights_.mutable_value() = a.get_f4("head.class_weights");
        return mc;
    }

private:
    ToyCnnEmbedder embedder_;
    MarginHeadConfig head_;
    nn::ParamSet<float> head_params_;
    Var<float> weights_;
};

/// Checkpoint a standalone toy provider (embedder or pose net).
inline void save_toy_provider(const ToyCnn& net, const std::string& kind, const std::filesystem::path& path) {
    Archive a;
    a.meta["provider"] = "toy-cnn";
    a.meta["kind"] = kind;
    a.meta["config"] = net.config().to_json();
    net.save_to(a, "backbone.");
    a.save(path);
}

// ----------------------------------------------------------------- registry

inline std::unique_ptr<EmbeddingProvider> make_embedder(const std::string& name, const OracleWorldSpec& world,
                                                        const std::filesystem::path& checkpoint = {}) {
    if (name == "oracle") return std::make_unique<OracleEmbedder>(world);
    if (name == "oracle-decoded") return std::make_unique<OracleEmbedder>(world, OracleEmbedder::Readout::Decoded);
    if (name == "toy-cnn") {
        if (checkpoint.empty()) throw ConfigError("toy-cnn embedder needs a checkpoint");
        const auto a = Archive::load(checkpoint);
        const auto kind = a.meta.value("kind", "");
        if (a.meta.value("provider", "") != "toy-cnn" || (kind != "embedder" && kind != "recognizer"))
            throw ConfigError(checkpoint.string() + " is not a toy-cnn embedder checkpoint");
        auto e = std::make_unique<ToyCnnEmbedder>(ToyCnnConfig::from_json(a.meta.at("config")), 0);
        e->net().load_from(a, "backbone.");
        return e;
    }
    throw ConfigError("unknown embedding provider '" + name + "' (known: oracle, oracle-decoded, toy-cnn)");
}

inline std::unique_ptr<PoseProvider> make_pose_estimator(const std::string& name, const OracleWorldSpec& world,
                                                         const std::filesystem::path& checkpoint = {}) {
    if (name == "oracle") return std::make_unique<OraclePoseEstimator>(world);
    if (name == "toy-cnn") {
        if (checkpoint.empty()) throw ConfigError("toy-cnn pose estimator needs a checkpoint");
        const auto a = Archive::load(checkpoint);
        if (a.meta.value("provider", "") != "toy-cnn" || a.meta.value("kind", "") != "pose")
            throw ConfigError(checkpoint.string() + " is not a toy-cnn pose checkpoint");
        auto p = std::make_unique<ToyPoseNet>(ToyCnnConfig::from_json(a.meta.at("config")), 0);
        p->net().load_from(a, "backbone.");
        return p;
    }
    throw ConfigError("unknown pose provider '" + name + "' (known: oracle, toy-cnn)");
}

/// Fit a toy pose regressor to oracle renders by mean squared error.
inline ToyPoseNet train_toy_pose_net(const OracleWorldSpec& world, ToyCnnConfig cfg, int steps, int batch,
                                     std::uint64_t seed, double lr = 1e-3) {
    ToyPoseNet net(std::move(cfg), seed);
    nn::Adam<float> opt(net.net().params().vars(), {.lr = lr, .beta1 = 0.9, .beta2 = 0.999});
    for (int step = 0; step < steps; ++step) {
        Rng rng(derive_seed(seed, 0x9053, static_cast<std::uint64_t>(step)));
        std::vector<OracleFactors> fs(static_cast<std::size_t>(batch));
        Tensor<float> target({batch, 3});
        for (int i = 0; i < batch; ++i) {
            fs[i].identity = world.identity(rng.index(world.identity_count()));
            fs[i].pose = world.sample_pose(rng);
            target[i * 3] = static_cast<float>(fs[i].pose.tx);
            target[i * 3 + 1] = static_cast<float>(fs[i].pose.ty);
            target[i * 3 + 2] = static_cast<float>(fs[i].pose.roll);
        }
        const auto imgs = render_oracle(fs, world);
        opt.zero_grad();
        const auto pred = net.forward(Var<float>::constant(imgs.pixels));
        ag::backward(ag::mean(ag::square(ag::sub(pred, Var<float>::constant(target)))));
        opt.step();
    }
    return net;
}

} // namespace synthid
