#pragma once

// Alternating GAN training over latent triplets.
//
// Each step renders a real batch, generates 3B images from
//   z1 = [z1_0; z1_0; z1_-],  z2 = [z2_0; z2_+; z2_0]
// (anchors, same-identity, same-pose), updates D on real vs detached
// anchors, then updates G on the anchor GAN loss plus the auxiliary losses
// over the whole triplet. All randomness of step t is derived from
// (seed, t), so a run resumed from a checkpoint replays exactly.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/aux_models.hpp"
#include "synthid/gan_core.hpp"
#include "synthid/losses.hpp"

namespace synthid {

struct TrainConfig {
    int steps = 6000;
    int batch_size = 8;
    double lr_g = 5e-3;
    double lr_d = 5e-3;
    double beta1 = 0.0;
    double beta2 = 0.99;
    std::uint64_t seed = 0;
    LossConfig losses;
    int checkpoint_interval = 1000;
    std::string embedder = "oracle";
    std::string pose_estimator = "oracle";
    std::filesystem::path embedder_checkpoint;
    std::filesystem::path pose_checkpoint;
    bool synthesis_noise = true;

    void validate() const {
        if (steps < 1) throw ConfigError("train: steps must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(lr_g > 0) || !(lr_d > 0)) throw ConfigError("train: learning rates must be positive");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must lie in [0, 1)");
        if (checkpoint_interval < 1) throw ConfigError("train: checkpoint_interval must be >= 1");
        losses.validate();
    }

    nlohmann::ordered_json to_json() const {
        return {{"steps", steps},
                {"batch_size", batch_size},
                {"lr_g", lr_g},
                {"lr_d", lr_d},
                {"beta1", beta1},
                {"beta2", beta2},
                {"seed", seed},
                {"losses", losses.to_json()},
                {"checkpoint_interval", checkpoint_interval},
                {"embedder", embedder},
                {"pose_estimator", pose_estimator},
                {"embedder_checkpoint", embedder_checkpoint.string()},
                {"pose_checkpoint", pose_checkpoint.string()},
                {"synthesis_noise", synthesis_noise}};
    }
};

/// Source of real training images.
class RealImageSource {
public:
    virtual ~RealImageSource() = default;
    virtual ImageBatch sample(Rng& rng, int n) = 0;
};

/// Renders of a fixed private pool of oracle identities at random poses.
class OracleRealSource final : public RealImageSource {
public:
    OracleRealSource(OracleWorldSpec world, std::vector<int> pool) : world_(std::move(world)), pool_(std::move(pool)) {
        if (pool_.empty()) throw ConfigError("real image pool is empty");
        for (int i : pool_) world_.identity(i);
    }

    ImageBatch sample(Rng& rng, int n) override {
        std::vector<OracleFactors> fs(static_cast<std::size_t>(n));
        for (auto& f : fs) {
            f.identity = world_.identity(pool_[static_cast<std::size_t>(rng.index(static_cast<int>(pool_.size())))]);
            f.pose = world_.sample_pose(rng);
        }
        return render_oracle(fs, world_);
    }

    const std::vector<int>& pool() const noexcept { return pool_; }

private:
    OracleWorldSpec world_;
    std::vector<int> pool_;
};

struct StepMetrics {
    long step = 0;
    double d_loss = 0, g_loss = 0, g_total = 0;
    std::optional<double> r1;
    double grad_norm_g = 0, grad_norm_d = 0;
    AuxLossReport aux;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"step", step}, {"d_loss", d_loss}, {"g_loss", g_loss}};
        const auto a = aux.to_json();
        for (const auto& [k, v] : a.items()) j[k] = v;
        j["g_total"] = g_total;
        j["r1"] = r1 ? nlohmann::ordered_json(*r1) : nlohmann::ordered_json(nullptr);
        j["grad_norm_g"] = grad_norm_g;
        j["grad_norm_d"] = grad_norm_d;
        return j;
    }
};

namespace detail {
inline double vars_grad_norm(std::vector<Var<float>>& vs) {
    double acc = 0;
    for (auto& v : vs) acc += sum_squares(v.grad());
    return std::sqrt(acc);
}
} // namespace detail

/// Model, optimizer moments and step counter.
class Trainer {
public:
    Trainer(GanModel model, TrainConfig cfg, const EmbeddingProvider& embedder, const PoseProvider& pose,
            RealImageSource& source)
        : model_(std::move(model)),
          cfg_(std::move(cfg)),
          embedder_(&embedder),
          pose_(&pose),
          source_(&source),
          g_params_(model_.generator_params()),
          d_params_(model_.discriminator_params()),
          opt_g_(g_params_, {cfg_.lr_g, cfg_.beta1, cfg_.beta2, 1e-8}),
          opt_d_(d_params_, {cfg_.lr_d, cfg_.beta1, cfg_.beta2, 1e-8}) {
        cfg_.validate();
        if (embedder.resolution() != model_.config().resolution || pose.resolution() != model_.config().resolution)
            throw ConfigError("provider resolution does not match the generator");
    }

    GanModel& model() noexcept { return model_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    long step_count() const noexcept { return step_; }

    StepMetrics step() {
        const int b = cfg_.batch_size;
        const int nz = model_.config().n_z;
        Rng latent_rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_), 0));
        Rng real_rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_), 1));

        std::vector<std::vector<float>> z1(3 * static_cast<std::size_t>(b)), z2(3 * static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) {
            auto t = sample_triplet(latent_rng, nz);
            z1[i] = t.anchor.z1;
            z2[i] = t.anchor.z2;
            z1[b + i] = std::move(t.same_identity.z1);
            z2[b + i] = std::move(t.same_identity.z2);
            z1[2 * b + i] = std::move(t.same_pose.z1);
            z2[2 * b + i] = std::move(t.same_pose.z2);
        }
        std::vector<std::uint64_t> keys;
        if (cfg_.synthesis_noise) {
            const auto base = row_noise_keys(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_), 2), b);
            for (int k = 0; k < 3; ++k) keys.insert(keys.end(), base.begin(), base.end());
        }
        const auto real = source_->sample(real_rng, b);
        if (real.height() != model_.config().resolution) throw ConfigError("real images have the wrong resolution");

        StepMetrics m;
        m.step = step_ + 1;

        // Generator forward over all 3B rows; the graph is reused for the G step.
        const auto fakes = model_.generate(Var<float>::constant(stack_latents(z1)), Var<float>::constant(stack_latents(z2)),
                                           keys);
        const auto anchors = ag::slice_rows(fakes, 0, b);

        // Discriminator: real batch vs detached anchors only.
        opt_d_.zero_grad();
        const auto d_loss = discriminator_loss(model_.discriminate(Var<float>::constant(real.pixels)),
                                               model_.discriminate(anchors.detach()));
        ag::backward(d_loss);
        m.d_loss = d_loss.item();
        if (cfg_.losses.r1 && cfg_.losses.r1_gamma > 0 && step_ % cfg_.losses.r1_interval == 0) {
            const std::function<Var<float>(const Var<float>&)> disc = [this](const Var<float>& x) {
                return model_.discriminate(x);
            };
            m.r1 = r1_penalty<float>(disc, real.pixels, d_params_, cfg_.losses.r1_gamma, cfg_.losses.r1_interval);
        }
        m.grad_norm_d = detail::vars_grad_norm(d_params_);
        check_finite(m, "discriminator");
        opt_d_.step();

        // Generator: anchor GAN loss plus auxiliary triplet losses, D frozen.
        opt_g_.zero_grad();
        model_.discriminator().set_trainable(false);
        const auto g_loss = generator_loss(model_.discriminate(anchors), cfg_.losses.objective);
        const auto emb = embedder_->forward(fakes);
        const auto pose = pose_->forward(fakes);
        const auto aux = aux_losses(ag::slice_rows(emb, 0, b), ag::slice_rows(emb, b, 2 * b),
                                    ag::slice_rows(emb, 2 * b, 3 * b), ag::slice_rows(pose, 0, b),
                                    ag::slice_rows(pose, b, 2 * b), ag::slice_rows(pose, 2 * b, 3 * b), cfg_.losses);
        const auto total = ag::add(g_loss, aux.total);
        ag::backward(total);
        model_.discriminator().set_trainable(true);
        m.g_loss = g_loss.item();
        m.aux = aux.report;
        m.g_total = total.item();
        m.grad_norm_g = detail::vars_grad_norm(g_params_);
        check_finite(m, "generator");
        opt_g_.step();

        ++step_;
        return m;
    }

    // ----------------------------------------------------------- checkpoint

    void save_checkpoint(const std::filesystem::path& path) {
        Archive a;
        model_.save_to(a);
        a.meta["train"] = {{"step", step_}, {"config", cfg_.to_json()}, {"adam_g_steps", opt_g_.steps()},
                           {"adam_d_steps", opt_d_.steps()}};
        put_moments(a, "adam_g", opt_g_);
        put_moments(a, "adam_d", opt_d_);
        a.save(path);
    }

    /// Restore weights, moments and step counter from a checkpoint.
    void restore(const std::filesystem::path& path) {
        const auto a = Archive::load(path);
        if (!a.meta.contains("train")) throw ConfigError(path.string() + " holds no training state");
        model_.load_from(a);
        step_ = a.meta["train"].at("step").get<long>();
        get_moments(a, "adam_g", opt_g_);
        get_moments(a, "adam_d", opt_d_);
        opt_g_.set_steps(a.meta["train"].at("adam_g_steps").get<long>());
        opt_d_.set_steps(a.meta["train"].at("adam_d_steps").get<long>());
    }

private:
    GanModel model_;
    TrainConfig cfg_;
    const EmbeddingProvider* embedder_;
    const PoseProvider* pose_;
    RealImageSource* source_;
    std::vector<Var<float>> g_params_, d_params_;
    nn::Adam<float> opt_g_, opt_d_;
    long step_ = 0;

    void check_finite(const StepMetrics& m, const char* phase) const {
        const bool ok = std::isfinite(m.d_loss) && std::isfinite(m.g_loss) && std::isfinite(m.g_total) &&
                        std::isfinite(m.grad_norm_d) && std::isfinite(m.grad_norm_g) && (!m.r1 || std::isfinite(*m.r1));
        if (!ok)
            throw NumericFault("non-finite " + std::string(phase) + " update at step " + std::to_string(m.step) + ": " +
                               m.to_json().dump());
    }

    static void put_moments(Archive& a, const std::string& prefix, nn::Adam<float>& opt) {
        const auto& m = opt.first_moments();
        const auto& v = opt.second_moments();
        for (std::size_t i = 0; i < m.size(); ++i) {
            a.put(prefix + ".m." + std::to_string(i), m[i]);
            a.put(prefix + ".v." + std::to_string(i), v[i]);
        }
    }
    static void get_moments(const Archive& a, const std::string& prefix, nn::Adam<float>& opt) {
        auto& m = opt.first_moments();
        auto& v = opt.second_moments();
        for (std::size_t i = 0; i < m.size(); ++i) {
            m[i] = a.get_f8(prefix + ".m." + std::to_string(i));
            v[i] = a.get_f8(prefix + ".v." + std::to_string(i));
        }
    }
};

struct DisentanglementReport {
    int triplets = 0;
    double theta_same = 0, theta_diff = 0;        // mean angles (rad)
    double pose_same_pose = 0, pose_same_id = 0;  // mean Euclidean pose distance to the anchor

    nlohmann::ordered_json to_json() const {
        return {{"triplets", triplets},
                {"theta_same", theta_same},
                {"theta_diff", theta_diff},
                {"pose_dist_same_pose", pose_same_pose},
                {"pose_dist_same_identity", pose_same_id}};
    }
};

/// Mean identity angles and pose distances over fresh triplets.
inline DisentanglementReport evaluate_disentanglement(const GanModel& model, const EmbeddingProvider& embedder,
                                                      const PoseProvider& pose, int triplets, std::uint64_t seed) {
    Rng rng(seed);
    const int nz = model.config().n_z;
    DisentanglementReport r;
    r.triplets = triplets;
    constexpr int kChunk = 32;
    for (int done = 0; done < triplets; done += kChunk) {
        const int b = std::min(kChunk, triplets - done);
        std::vector<std::vector<float>> z1(3 * static_cast<std::size_t>(b)), z2(3 * static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) {
            auto t = sample_triplet(rng, nz);
            z1[i] = t.anchor.z1;
            z2[i] = t.anchor.z2;
            z1[b + i] = t.same_identity.z1;
            z2[b + i] = t.same_identity.z2;
            z1[2 * b + i] = t.same_pose.z1;
            z2[2 * b + i] = t.same_pose.z2;
        }
        auto keys = row_noise_keys(derive_seed(seed, static_cast<std::uint64_t>(done)), b);
        for (int k = 0; k < 2; ++k) keys.insert(keys.end(), keys.begin(), keys.begin() + b);
        const auto imgs = model.generate_images(stack_latents(z1), stack_latents(z2), keys);
        const auto e = embedder.embed(imgs);
        const auto p = pose.estimate_pose(imgs);
        for (int i = 0; i < b; ++i) {
            r.theta_same += angle_between(e[i], e[b + i]);
            r.theta_diff += angle_between(e[i], e[2 * b + i]);
            r.pose_same_id += std::sqrt(pose_sq_distance(p[i], p[b + i]));
            r.pose_same_pose += std::sqrt(pose_sq_distance(p[i], p[2 * b + i]));
        }
    }
    r.theta_same /= triplets;
    r.theta_diff /= triplets;
    r.pose_same_id /= triplets;
    r.pose_same_pose /= triplets;
    return r;
}

struct TrainPaths {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume_from;

    std::filesystem::path metrics() const { return out_dir / "metrics.jsonl"; }
    std::filesystem::path final_checkpoint() const { return out_dir / "gan.sidarch"; }
    std::filesystem::path checkpoint(long step) const {
        std::ostringstream os;
        os << "checkpoint_" << std::setw(7) << std::setfill('0') << step << ".sidarch";
        return out_dir / os.str();
    }
};

struct TrainResult {
    std::filesystem::path checkpoint;
    long steps = 0;
    double seconds = 0;
    StepMetrics last;
};

/// Run (or resume) training, writing periodic checkpoints, the final
/// checkpoint and the metrics log.
inline TrainResult train(GanModel model, const TrainConfig& cfg, const EmbeddingProvider& embedder,
                         const PoseProvider& pose, RealImageSource& source, const TrainPaths& paths,
                         const std::function<void(const StepMetrics&)>& on_step = {}) {
    cfg.validate();
    std::filesystem::create_directories(paths.out_dir);
    Trainer trainer(std::move(model), cfg, embedder, pose, source);

    std::vector<std::string> kept;
    if (paths.resume_from) {
        trainer.restore(*paths.resume_from);
        std::ifstream in(paths.metrics());
        for (std::string line; std::getline(in, line) && static_cast<long>(kept.size()) < trainer.step_count();)
            kept.push_back(line);
        if (static_cast<long>(kept.size()) != trainer.step_count())
            throw ConfigError("metrics log has fewer rows than the resumed step count");
    }
    {
        std::ofstream out(paths.metrics(), std::ios::trunc);
        for (const auto& l : kept) out << l << '\n';
    }
    std::ofstream log(paths.metrics(), std::ios::app);
    if (!log) throw IoError("cannot write " + paths.metrics().string());

    TrainResult res;
    const auto t0 = std::chrono::steady_clock::now();
    while (trainer.step_count() < cfg.steps) {
        res.last = trainer.step();
        log << res.last.to_json().dump() << '\n';
        log.flush();
        if (on_step) on_step(res.last);
        if (trainer.step_count() % cfg.checkpoint_interval == 0 && trainer.step_count() < cfg.steps)
            trainer.save_checkpoint(paths.checkpoint(trainer.step_count()));
    }
    trainer.save_checkpoint(paths.final_checkpoint());
    res.checkpoint = paths.final_checkpoint();
    res.steps = trainer.step_count();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace synthid
