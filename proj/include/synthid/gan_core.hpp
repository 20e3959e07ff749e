#pragma once

// Dual-latent generator and discriminator.
//
//   z1 -> mapper_id    --+
//                        +-> concat [id | nonid] -> projector -> w -> synthesis -> image
//   z2 -> mapper_nonid --+
//
// Synthesis: w -> linear -> [C0, b, b], then per block: (upsample x2 except
// the first) -> conv3x3 -> keyed noise -> style x*(1+gamma(w))+beta(w) ->
// leaky ReLU; finally a 1x1 projection to RGB and tanh. One fused w feeds
// every block.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/archive.hpp"
#include "synthid/nn.hpp"
#include "synthid/types.hpp"

namespace synthid {

using ag::Var;

inline constexpr const char* kConcatOrder = "id|nonid";
inline constexpr int kGanFormatVersion = 1;
inline constexpr int kMbstdGroup = 4;

struct GanConfig {
    int n_z = 64;
    int n_w = 128;
    int resolution = 32;
    int channels = 3;
    std::vector<int> synth_channels{48, 32, 16, 8};
    std::vector<int> disc_channels{16, 16, 32, 64};

    int base_resolution() const { return resolution >> (synth_channels.size() - 1); }
    int disc_resolution() const { return resolution >> (disc_channels.size() - 1); }

    void validate() const {
        if (n_z < 1 || n_w < 1 || channels < 1) throw ConfigError("gan: n_z, n_w and channels must be positive");
        if (synth_channels.empty() || disc_channels.empty()) throw ConfigError("gan: empty channel lists");
        for (int c : synth_channels)
            if (c < 1) throw ConfigError("gan: channel counts must be positive");
        for (int c : disc_channels)
            if (c < 1) throw ConfigError("gan: channel counts must be positive");
        if (base_resolution() < 1 || (base_resolution() << (synth_channels.size() - 1)) != resolution)
            throw ConfigError("gan: resolution " + std::to_string(resolution) + " not reachable with " +
                              std::to_string(synth_channels.size()) + " synthesis blocks");
        if (disc_resolution() < 1 || (disc_resolution() << (disc_channels.size() - 1)) != resolution)
            throw ConfigError("gan: resolution not divisible by the discriminator's downsampling");
    }

    nlohmann::ordered_json to_json() const {
        return {{"n_z", n_z},           {"n_w", n_w},
                {"resolution", resolution}, {"channels", channels},
                {"synth_channels", synth_channels}, {"disc_channels", disc_channels}};
    }
    static GanConfig from_json(const nlohmann::ordered_json& j) {
        GanConfig c;
        c.n_z = j.at("n_z").get<int>();
        c.n_w = j.at("n_w").get<int>();
        c.resolution = j.at("resolution").get<int>();
        c.channels = j.at("channels").get<int>();
        c.synth_channels = j.at("synth_channels").get<std::vector<int>>();
        c.disc_channels = j.at("disc_channels").get<std::vector<int>>();
        return c;
    }
};

struct LatentPair {
    std::vector<float> z1, z2;
};

struct LatentTriplet {
    LatentPair anchor;         // (z1_0, z2_0)
    LatentPair same_identity;  // (z1_0, z2_+)
    LatentPair same_pose;      // (z1_-, z2_0)
};

/// Draws z1_0, z2_0, z2_+, z1_- in that order: exactly 4*n_z normals.
inline LatentTriplet sample_triplet(Rng& rng, int n_z) {
    if (n_z < 1) throw ArgumentError("sample_triplet: n_z must be >= 1");
    auto draw = [&] {
        std::vector<float> v(static_cast<std::size_t>(n_z));
        for (auto& x : v) x = static_cast<float>(rng.normal());
        return v;
    };
    auto z1_0 = draw();
    auto z2_0 = draw();
    auto z2_p = draw();
    auto z1_m = draw();
    return {{z1_0, z2_0}, {z1_0, std::move(z2_p)}, {std::move(z1_m), z2_0}};
}

/// Stack latent rows into [B, n_z].
inline Tensor<float> stack_latents(const std::vector<std::vector<float>>& rows) {
    if (rows.empty()) throw ArgumentError("stack_latents: no rows");
    const int d = static_cast<int>(rows.front().size());
    Tensor<float> t({static_cast<int>(rows.size()), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<int>(rows[i].size()) != d) throw ArgumentError("stack_latents: ragged rows");
        std::copy(rows[i].begin(), rows[i].end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return t;
}

struct Mapper {
    nn::Linear<float> fc1, fc2;

    Mapper() = default;
    Mapper(nn::ParamSet<float>& ps, int n_z, Rng& rng)
        : fc1(ps, "fc1", n_z, n_z, rng, nn::kLeakyGain), fc2(ps, "fc2", n_z, n_z, rng) {}

    Var<float> operator()(const Var<float>& z) const { return fc2(ag::leaky_relu(fc1(z), nn::kLeakySlope)); }
};

class GanModel {
public:
    GanModel(GanConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        map_id_ = Mapper(mapper_id_, cfg_.n_z, rng);
        map_nonid_ = Mapper(mapper_nonid_, cfg_.n_z, rng);
        proj_ = nn::Linear<float>(projector_, "fc", 2 * cfg_.n_z, cfg_.n_w, rng);

        const int b = cfg_.base_resolution();
        const int c0 = cfg_.synth_channels.front();
        input_ = nn::Linear<float>(synthesis_, "input", cfg_.n_w, c0 * b * b, rng);
        int in = c0;
        for (std::size_t i = 0; i < cfg_.synth_channels.size(); ++i) {
            const int out = cfg_.synth_channels[i];
            const auto p = "block" + std::to_string(i);
            Block blk;
            blk.conv = nn::Conv2d<float>(synthesis_, p + ".conv", in, out, 3, 1, 1, rng, nn::kLeakyGain);
            blk.noise_strength = synthesis_.add(p + ".noise_strength", Tensor<float>({out}));
            blk.gamma = nn::Linear<float>(synthesis_, p + ".gamma", cfg_.n_w, out, rng, 0.25f);
            blk.beta = nn::Linear<float>(synthesis_, p + ".beta", cfg_.n_w, out, rng, 0.25f);
            blocks_.push_back(std::move(blk));
            in = out;
        }
        to_rgb_ = nn::Conv2d<float>(synthesis_, "to_rgb", in, cfg_.channels, 1, 1, 0, rng);

        int dc = cfg_.disc_channels.front();
        from_rgb_ = nn::Conv2d<float>(discriminator_, "from_rgb", cfg_.channels, dc, 1, 1, 0, rng, nn::kLeakyGain);
        for (std::size_t i = 1; i < cfg_.disc_channels.size(); ++i) {
            const int out = cfg_.disc_channels[i];
            down_.emplace_back(discriminator_, "down" + std::to_string(i - 1), dc, out, 3, 2, 1, rng, nn::kLeakyGain);
            dc = out;
        }
        const int dr = cfg_.disc_resolution();
        disc_flat_ = dc * dr * dr;
        score_ = nn::Linear<float>(discriminator_, "score", disc_flat_ + 1, 1, rng);
    }

    GanModel(const GanModel&) = delete;
    GanModel& operator=(const GanModel&) = delete;
    GanModel(GanModel&&) = default;
    GanModel& operator=(GanModel&&) = default;

    const GanConfig& config() const noexcept { return cfg_; }

    nn::ParamSet<float>& mapper_id() noexcept { return mapper_id_; }
    nn::ParamSet<float>& mapper_nonid() noexcept { return mapper_nonid_; }
    nn::ParamSet<float>& projector() noexcept { return projector_; }
    nn::ParamSet<float>& synthesis() noexcept { return synthesis_; }
    nn::ParamSet<float>& discriminator() noexcept { return discriminator_; }
    const nn::ParamSet<float>& discriminator() const noexcept { return discriminator_; }

    std::vector<Var<float>> generator_params() const {
        std::vector<Var<float>> out;
        for (const auto* ps : {&mapper_id_, &mapper_nonid_, &projector_, &synthesis_})
            for (const auto& v : ps->vars()) out.push_back(v);
        return out;
    }
    std::vector<Var<float>> discriminator_params() const { return discriminator_.vars(); }

    // ------------------------------------------------------ differentiable

    Var<float> fuse(const Var<float>& z1, const Var<float>& z2) const {
        check_latent(z1, "z1");
        check_latent(z2, "z2");
        if (z1.dim(0) != z2.dim(0)) throw ConfigError("z1 and z2 batch sizes differ");
        return proj_(ag::concat_cols(map_id_(z1), map_nonid_(z2)));
    }

    /// Per-row noise keys; an empty span disables synthesis noise.
    Var<float> synthesize(const Var<float>& w, std::span<const std::uint64_t> noise_keys = {}) const {
        const int n = w.dim(0);
        if (w.shape() != Shape{n, cfg_.n_w})
            throw ConfigError("style batch must be [B," + std::to_string(cfg_.n_w) + "], got " + shape_str(w.shape()));
        if (!noise_keys.empty() && static_cast<int>(noise_keys.size()) != n)
            throw ArgumentError("synthesize: need one noise key per row");
        int res = cfg_.base_resolution();
        Var<float> h = ag::reshape(input_(w), {n, cfg_.synth_channels.front(), res, res});
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& blk = blocks_[i];
            if (i > 0) {
                h = ag::upsample2x(h);
                res *= 2;
            }
            h = blk.conv(h);
            if (!noise_keys.empty()) h = ag::add_noise(h, blk.noise_strength, noise_field(noise_keys, i, res));
            h = ag::leaky_relu(ag::modulate(h, blk.gamma(w), blk.beta(w)), nn::kLeakySlope);
            if (!h.value().all_finite())
                throw NumericFault("non-finite activation in synthesis block " + std::to_string(i), static_cast<int>(i));
        }
        auto img = ag::tanh(to_rgb_(h));
        if (!img.value().all_finite())
            throw NumericFault("non-finite synthesis output", static_cast<int>(blocks_.size()));
        return img;
    }

    Var<float> generate(const Var<float>& z1, const Var<float>& z2, std::span<const std::uint64_t> noise_keys = {}) const {
        return synthesize(fuse(z1, z2), noise_keys);
    }

    /// Real/fake logits [B].
    Var<float> discriminate(const Var<float>& images) const {
        const int n = images.dim(0);
        if (images.shape() != Shape{n, cfg_.channels, cfg_.resolution, cfg_.resolution})
            throw ConfigError("discriminator expects [B," + std::to_string(cfg_.channels) + "," +
                              std::to_string(cfg_.resolution) + "," + std::to_string(cfg_.resolution) + "], got " +
                              shape_str(images.shape()));
        Var<float> h = ag::leaky_relu(from_rgb_(images), nn::kLeakySlope);
        for (const auto& c : down_) h = ag::leaky_relu(c(h), nn::kLeakySlope);
        return ag::reshape(score_(ag::minibatch_stddev(ag::reshape(h, {n, disc_flat_}), kMbstdGroup)), {n});
    }

    // ------------------------------------------------------------ inference

    Tensor<float> fuse_styles(const Tensor<float>& z1, const Tensor<float>& z2) const {
        return fuse(Var<float>::constant(z1), Var<float>::constant(z2)).value();
    }

    ImageBatch generate_images(const Tensor<float>& z1, const Tensor<float>& z2,
                               std::span<const std::uint64_t> noise_keys = {}) const {
        ImageBatch out;
        out.pixels = generate(Var<float>::constant(z1), Var<float>::constant(z2), noise_keys).value();
        return out;
    }

    std::vector<double> discriminate_images(const ImageBatch& images) const {
        const auto s = discriminate(Var<float>::constant(images.pixels)).value();
        return {s.data.begin(), s.data.end()};
    }

    // ----------------------------------------------------------- checkpoint

    void save_to(Archive& a) const {
        a.meta["format_version"] = kGanFormatVersion;
        a.meta["concat_order"] = kConcatOrder;
        a.meta["config"] = cfg_.to_json();
        for (const auto& [prefix, ps] : sets())
            for (const auto& [n, v] : ps->items()) a.put(prefix + "." + n, v.value());
    }

    void load_from(const Archive& a) {
        if (a.meta.value("format_version", -1) != kGanFormatVersion)
            throw ConfigError("unsupported GAN checkpoint format version");
        if (a.meta.value("concat_order", "") != kConcatOrder)
            throw ConfigError("GAN checkpoint has concat order '" + a.meta.value("concat_order", "") + "'");
        if (GanConfig::from_json(a.meta.at("config")).to_json() != cfg_.to_json())
            throw ConfigError("GAN checkpoint config does not match the model");
        for (auto& [prefix, ps] : mutable_sets())
            for (auto& [n, v] : ps->items()) {
                auto t = a.get_f4(prefix + "." + n);
                if (t.shape != v.shape()) throw ConfigError("checkpoint tensor " + prefix + "." + n + " has wrong shape");
                v.mutable_value() = std::move(t);
            }
    }

    void save(const std::filesystem::path& path) const {
        Archive a;
        save_to(a);
        a.save(path);
    }

    static GanModel load(const std::filesystem::path& path) {
        const auto a = Archive::load(path);
        if (!a.meta.contains("config")) throw ConfigError(path.string() + " is not a GAN checkpoint");
        GanModel m(GanConfig::from_json(a.meta.at("config")), 0);
        m.load_from(a);
        return m;
    }

private:
    struct Block {
        nn::Conv2d<float> conv;
        Var<float> noise_strength;
        nn::Linear<float> gamma, beta;
    };

    GanConfig cfg_;
    nn::ParamSet<float> mapper_id_, mapper_nonid_, projector_, synthesis_, discriminator_;
    Mapper map_id_, map_nonid_;
    nn::Linear<float> proj_, input_;
    std::vector<Block> blocks_;
    nn::Conv2d<float> to_rgb_, from_rgb_;
    std::vector<nn::Conv2d<float>> down_;
    nn::Linear<float> score_;
    int disc_flat_ = 0;

    std::vector<std::pair<std::string, const nn::ParamSet<float>*>> sets() const {
        return {{"mapper_id", &mapper_id_},
                {"mapper_nonid", &mapper_nonid_},
                {"projector", &projector_},
                {"synthesis", &synthesis_},
                {"discriminator", &discriminator_}};
    }

    std::vector<std::pair<std::string, nn::ParamSet<float>*>> mutable_sets() {
        return {{"mapper_id", &mapper_id_},
                {"mapper_nonid", &mapper_nonid_},
                {"projector", &projector_},
                {"synthesis", &synthesis_},
                {"discriminator", &discriminator_}};
    }

    void check_latent(const Var<float>& z, const char* what) const {
        if (z.shape().size() != 2 || z.dim(1) != cfg_.n_z)
            throw ConfigError(std::string(what) + " must be [B," + std::to_string(cfg_.n_z) + "], got " +
                              shape_str(z.shape()));
    }

    static Tensor<float> noise_field(std::span<const std::uint64_t> keys, std::size_t block, int res) {
        const int hw = res * res;
        Tensor<float> t({static_cast<int>(keys.size()), hw});
        for (std::size_t i = 0; i < keys.size(); ++i) {
            Rng rng(derive_seed(keys[i], block));
            for (int k = 0; k < hw; ++k) t[i * hw + k] = static_cast<float>(rng.normal());
        }
        return t;
    }
};

/// Noise keys for a batch: one derived key per row.
inline std::vector<std::uint64_t> row_noise_keys(std::uint64_t key, int rows, std::uint64_t first = 0) {
    std::vector<std::uint64_t> out(static_cast<std::size_t>(rows));
    for (int i = 0; i < rows; ++i) out[static_cast<std::size_t>(i)] = derive_seed(key, first + static_cast<std::uint64_t>(i));
    return out;
}

} // namespace synthid
