#pragma once

// End-to-end driver: train-gan -> gen-dataset -> train-recognizer ->
// eval-verification -> attack -> frechet, all under one output root.
//
// Layout under the root:
//   config.resolved.ini
//   gan/          gan.sidarch, metrics.jsonl, periodic checkpoints
//   data/         synthetic/, real/, test/, validation/ (manifest.json each);
//                 test/ and validation/ also hold pairs.txt
//   recognizer/   recognizer.sidarch, epochs.jsonl
//   verification/ report.json, roc.txt
//   attack/       report.json (configured variant), report_<variant>.json, histogram_<variant>.txt
//   frechet/      generic.sidarch, generic.json, identity.json, table.txt
//   summary.json, digests.json (git blob ids of every other file)
//
// A skipped stage must find its outputs from an earlier run.

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>

#include "synthid/config.hpp"
#include "synthid/digest.hpp"

namespace synthid {

enum class Stage { TrainGan, GenDataset, TrainRecognizer, EvalVerification, Attack, Frechet };

inline constexpr std::array kStages{Stage::TrainGan,         Stage::GenDataset, Stage::TrainRecognizer,
                                    Stage::EvalVerification, Stage::Attack,     Stage::Frechet};

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::TrainGan: return "train-gan";
    case Stage::GenDataset: return "gen-dataset";
    case Stage::TrainRecognizer: return "train-recognizer";
    case Stage::EvalVerification: return "eval-verification";
    case Stage::Attack: return "attack";
    case Stage::Frechet: return "frechet";
    }
    return "?";
}

inline Stage parse_stage(const std::string& s) {
    for (Stage st : kStages)
        if (to_string(st) == s) return st;
    throw ConfigError("unknown pipeline stage '" + s + "'");
}

/// A stage threw; the message carries the stage name.
class StageFailure : public std::runtime_error {
public:
    StageFailure(Stage s, const std::string& what)
        : std::runtime_error("stage " + to_string(s) + " failed: " + what), stage_(s) {}
    Stage stage() const noexcept { return stage_; }

private:
    Stage stage_;
};

struct PipelineOptions {
    std::filesystem::path out;
    std::set<Stage> skip;
    std::function<void(const std::string&)> log;
};

struct PipelineLayout {
    std::filesystem::path root;

    std::filesystem::path gan_dir() const { return root / "gan"; }
    std::filesystem::path gan() const { return gan_dir() / "gan.sidarch"; }
    std::filesystem::path data(const std::string& name) const { return root / "data" / name; }
    std::filesystem::path manifest(const std::string& name) const { return data(name) / "manifest.json"; }
    std::filesystem::path pairs(const std::string& name) const { return data(name) / "pairs.txt"; }
    std::filesystem::path recognizer() const { return root / "recognizer" / "recognizer.sidarch"; }
    std::filesystem::path verification() const { return root / "verification" / "report.json"; }
    std::filesystem::path attack() const { return root / "attack" / "report.json"; }
    std::filesystem::path frechet_dir() const { return root / "frechet"; }
    std::filesystem::path summary() const { return root / "summary.json"; }
    std::filesystem::path digests() const { return root / "digests.json"; }
};

struct PipelineResult {
    std::vector<Stage> ran;
    std::optional<double> verification_accuracy;
    nlohmann::ordered_json summary;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
}

inline nlohmann::ordered_json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("missing " + p.string() + " (did an earlier run produce it?)");
    return nlohmann::ordered_json::parse(in);
}

inline void require(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw IoError("missing " + p.string() + " (did an earlier run produce it?)");
}

// Relative path -> git blob id, for every regular file except the digest file itself.
inline nlohmann::ordered_json tree_digests(const std::filesystem::path& root, const std::filesystem::path& skip) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path() != skip) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& f : files) j[f.lexically_relative(root).generic_string()] = git_blob_digest(read_file_bytes(f));
    return j;
}

// Seeded member subset of a loaded dataset, order kept.
inline LabelledImages take(const LabelledImages& d, int count, std::uint64_t seed) {
    const int n = d.images.batch();
    if (count >= n) return d;
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    LabelledImages out;
    Shape shp = d.images.pixels.shape;
    shp[0] = count;
    out.images.pixels = Tensor<float>(shp);
    const std::size_t per = d.images.pixels.size() / static_cast<std::size_t>(n);
    for (int i = 0; i < count; ++i) {
        const auto src = static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
        std::copy_n(d.images.pixels.ptr() + src * per, per, out.images.pixels.ptr() + static_cast<std::size_t>(i) * per);
        out.labels.push_back(d.labels[src]);
        out.paths.push_back(d.paths[src]);
    }
    return out;
}

inline std::vector<std::string> relative_ids(const std::vector<std::string>& paths, const std::filesystem::path& root) {
    std::vector<std::string> ids;
    for (const auto& p : paths) ids.push_back(std::filesystem::path(p).lexically_relative(root).generic_string());
    return ids;
}

inline std::string roc_table(const VerificationResult& r) {
    std::string out = "# threshold tpr fpr\n";
    for (const auto& p : r.roc) out += format_double(p.threshold) + " " + format_double(p.tpr) + " " + format_double(p.fpr) + "\n";
    return out;
}

} // namespace detail

// Stage seeds, derived from the experiment seed.
enum SeedTag : std::uint64_t { kSeedPool = 101, kSeedGan, kSeedTrain, kSeedData, kSeedTest, kSeedVal, kSeedReal,
                               kSeedRecognizer, kSeedAttack, kSeedFrechet };

/// World identity pools: GAN real images, held-out test, validation. Disjoint.
struct IdentityPools {
    std::vector<int> real, test, validation;
};

inline IdentityPools identity_pools(const ExperimentConfig& c) {
    IdentityPools p;
    const auto& w = c.world.spec;
    p.real = sample_identity_pool(w, c.world.real_pool, derive_seed(c.seed, kSeedPool));
    p.test = sample_identity_pool(w, c.dataset.test_identities, derive_seed(c.seed, kSeedTest), p.real);
    auto used = p.real;
    used.insert(used.end(), p.test.begin(), p.test.end());
    p.validation = sample_identity_pool(w, c.dataset.validation_identities, derive_seed(c.seed, kSeedVal), used);
    return p;
}

inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opt) {
    cfg.validate();
    if (opt.out.empty()) throw ArgumentError("run_pipeline: no output root");
    const PipelineLayout L{opt.out};
    std::filesystem::create_directories(L.root);
    detail::write_text(L.root / "config.resolved.ini", resolved_config(cfg));
    auto log = [&](const std::string& s) {
        if (opt.log) opt.log(s);
    };
    const auto pools = identity_pools(cfg);
    const auto& world = cfg.world.spec;
    PipelineResult res;
    nlohmann::ordered_json& summary = res.summary;
    summary["seed"] = cfg.seed;

    auto stage = [&](Stage s, const std::function<void()>& body) {
        if (opt.skip.count(s)) {
            log("skip " + to_string(s));
            return;
        }
        log("run " + to_string(s));
        const auto t0 = std::chrono::steady_clock::now();
        try {
            body();
        } catch (const StageFailure&) {
            throw;
        } catch (const std::exception& e) {
            throw StageFailure(s, e.what());
        }
        res.ran.push_back(s);
        log(to_string(s) + " done in " +
            std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
    };

    stage(Stage::TrainGan, [&] {
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.seed, kSeedTrain);
        const auto emb = make_embedder(tc.embedder, world, tc.embedder_checkpoint);
        const auto pose = make_pose_estimator(tc.pose_estimator, world, tc.pose_checkpoint);
        OracleRealSource source(world, pools.real);
        std::filesystem::remove_all(L.gan_dir());
        const auto r = train(GanModel(cfg.gan, derive_seed(cfg.seed, kSeedGan)), tc, *emb, *pose, source, {L.gan_dir(), {}},
                             [&](const StepMetrics& m) {
                                 if (m.step % 500 == 0) log("  gan step " + std::to_string(m.step));
                             });
        summary["gan"] = {{"steps", r.steps}, {"checkpoint", "gan/gan.sidarch"}};
    });

    stage(Stage::GenDataset, [&] {
        detail::require(L.gan());
        std::filesystem::remove_all(L.root / "data");
        GenerateOptions g = cfg.dataset.gen;
        g.seed = derive_seed(cfg.seed, kSeedData);
        const auto syn = generate_dataset(L.gan(), g, L.data("synthetic"));

        OracleExportOptions test{0, cfg.dataset.test_images, derive_seed(cfg.seed, kSeedTest), pools.test, {}};
        export_oracle_dataset(world, test, L.data("test"));
        OracleExportOptions val{0, cfg.dataset.validation_images, derive_seed(cfg.seed, kSeedVal), pools.validation, {}};
        export_oracle_dataset(world, val, L.data("validation"));
        OracleExportOptions real{0, cfg.dataset.gen.m, derive_seed(cfg.seed, kSeedReal), pools.real, {}};
        export_oracle_dataset(world, real, L.data("real"));

        ProtocolOptions tp = cfg.protocol;
        tp.seed = derive_seed(cfg.seed, kSeedTest, 1);
        write_protocol(make_protocol(L.manifest("test"), tp, L.data("test")), L.pairs("test"));
        ProtocolOptions vp = cfg.protocol;
        vp.seed = derive_seed(cfg.seed, kSeedVal, 1);
        write_protocol(make_protocol(L.manifest("validation"), vp, L.data("validation")), L.pairs("validation"));
        summary["dataset"] = {{"synthetic_images", syn.n_images()}, {"synthetic_identities", syn.n_identities()}};
    });

    stage(Stage::TrainRecognizer, [&] {
        detail::require(L.manifest("synthetic"));
        detail::require(L.pairs("validation"));
        RecognizerTrainConfig rc = cfg.recognizer.train;
        rc.seed = derive_seed(cfg.seed, kSeedRecognizer);
        std::filesystem::create_directories(L.recognizer().parent_path());
        const auto r = train_recognizer(L.manifest("synthetic"), cfg.recognizer.head, rc, L.recognizer(), L.pairs("validation"));
        std::string lines;
        for (const auto& e : r.epochs) {
            nlohmann::ordered_json j{{"epoch", e.epoch}, {"steps", e.steps}, {"loss", e.loss}};
            if (e.validation_accuracy) j["validation_accuracy"] = *e.validation_accuracy;
            lines += j.dump() + "\n";
        }
        detail::write_text(L.root / "recognizer" / "epochs.jsonl", lines);
        summary["recognizer"] = {{"epochs", r.epochs.size()}, {"best_epoch", r.best_epoch}, {"final_loss", r.final_loss}};
    });

    stage(Stage::EvalVerification, [&] {
        detail::require(L.recognizer());
        const auto emb = make_embedder("toy-cnn", world, L.recognizer());
        const auto r = evaluate_verification(*emb, read_protocol(L.pairs("test")), L.data("test"));
        detail::write_text(L.verification(), r.to_json().dump(2) + "\n");
        detail::write_text(L.root / "verification" / "roc.txt", detail::roc_table(r));
        summary["verification_accuracy"] = r.accuracy;
    });

    stage(Stage::Attack, [&] {
        detail::require(L.recognizer());
        const auto model = MarginClassifier::load(L.recognizer());
        const auto members = detail::take(load_dataset(L.manifest("synthetic")), cfg.attack.max_members,
                                           derive_seed(cfg.seed, kSeedAttack));
        const auto nonmembers = load_dataset(L.manifest("test"));
        const auto mids = detail::relative_ids(members.paths, L.root);
        const auto nids = detail::relative_ids(nonmembers.paths, L.root);
        const AttackSamples ms{model.embedder().embed(members.images), members.labels, mids};
        const AttackSamples ns{model.embedder().embed(nonmembers.images), {}, nids};
        const auto w = model.class_weights();
        for (AttackVariant v : {AttackVariant::Margin, AttackVariant::NoMargin}) {
            const auto r = run_attack(w, model.head(), ms, ns, v, cfg.attack.bins);
            const auto dir = L.root / "attack";
            detail::write_text(dir / ("report_" + to_string(v) + ".json"), r.to_json().dump(2) + "\n");
            detail::write_text(dir / ("histogram_" + to_string(v) + ".txt"), r.histogram_table());
            if (v == cfg.attack.variant) {
                detail::write_text(L.attack(), r.to_json().dump(2) + "\n");
                summary["attack"] = {{"variant", to_string(v)}, {"member_fraction", r.member_fraction}, {"auc", r.auc}};
            }
        }
    });

    stage(Stage::Frechet, [&] {
        detail::require(L.recognizer());
        const std::vector<std::filesystem::path> sets{L.manifest("synthetic"), L.manifest("real"), L.manifest("test")};
        for (const auto& m : sets) detail::require(m);
        const auto generic =
            train_generic_feature_net(world, cfg.frechet.generic_steps, 32, derive_seed(cfg.seed, kSeedFrechet));
        generic.save(L.frechet_dir() / "generic.sidarch");
        const IdentitySpace ident(std::shared_ptr<const EmbeddingProvider>(make_embedder("toy-cnn", world, L.recognizer())));
        const auto seed = derive_seed(cfg.seed, kSeedFrechet, 1);
        const auto g = distance_matrix(sets, generic, cfg.frechet.max_images, seed);
        const auto i = distance_matrix(sets, ident, cfg.frechet.max_images, seed);
        detail::write_text(L.frechet_dir() / "generic.json", g.to_json().dump(2) + "\n");
        detail::write_text(L.frechet_dir() / "identity.json", i.to_json().dump(2) + "\n");
        detail::write_text(L.frechet_dir() / "table.txt", table_report(g, i));
        summary["frechet"] = {{"generic", g.to_json()["pairs"]}, {"identity", i.to_json()["pairs"]}};
    });

    if (std::filesystem::exists(L.verification()))
        res.verification_accuracy = detail::read_json(L.verification()).at("accuracy").get<double>();
    detail::write_text(L.summary(), summary.dump(2) + "\n");
    detail::write_text(L.digests(), detail::tree_digests(L.root, L.digests()).dump(2) + "\n");
    return res;
}

inline PipelineResult run_pipeline(const std::filesystem::path& config_path, const PipelineOptions& opt) {
    return run_pipeline(load_config(config_path), opt);
}

} // namespace synthid
