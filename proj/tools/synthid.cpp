// synthid command-line entry point.
//
// Exit status: 0 success, 2 usage error, 1 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "synthid/pipeline.hpp"

using namespace synthid;
namespace fs = std::filesystem;

namespace {

void say(const std::string& s) { std::cerr << s << '\n'; }

void write_json(const fs::path& p, const nlohmann::ordered_json& j) { detail::write_text(p, j.dump(2) + "\n"); }

// Optional INI file for a subcommand: defaults for the sections it uses.
ExperimentConfig base_config(const std::string& path) {
    if (path.empty()) {
        ExperimentConfig c;
        apply_env_overrides(c, process_environment());
        return c;
    }
    return load_config(path);
}

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
};

CLI::App* add(CLI::App& app, const std::string& name, const std::string& help, Common& c, bool needs_out = true) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--seed", c.seed, "Seed for every random draw")->capture_default_str();
    auto* out = sub->add_option("--out", c.out, "Output root");
    if (needs_out) out->required();
    return sub;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Identity-disentangled synthetic dataset toolkit"};
    app.require_subcommand(1);
    app.footer("Config keys can be overridden with SYNTHID_<SECTION>_<KEY>, e.g. SYNTHID_TRAIN_STEPS=200.");

    // train-gan
    Common tg;
    long steps = 0;
    std::string resume;
    auto* train_gan = add(app, "train-gan", "Train the identity/pose disentangled GAN on oracle renders", tg);
    train_gan->add_option("--config", tg.config, "INI file ([world] [gan] [losses] [train] [providers])")->check(CLI::ExistingFile);
    train_gan->add_option("--steps", steps, "Override train.steps");
    train_gan->add_option("--resume", resume, "Resume from a training checkpoint")->check(CLI::ExistingFile);

    // gen-dataset
    Common gd;
    std::string checkpoint;
    int k = 50, m = 20;
    bool no_noise = false;
    auto* gen = add(app, "gen-dataset", "Generate K identities x M images from a GAN checkpoint", gd);
    gen->add_option("--checkpoint", checkpoint, "GAN checkpoint")->required()->check(CLI::ExistingFile);
    gen->add_option("--k", k, "Identities")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--m", m, "Images per identity")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_flag("--no-noise", no_noise, "Disable per-pixel synthesis noise");

    // gen-oracle-dataset
    Common go;
    int ok = 50, om = 20;
    std::vector<std::string> exclude_from;
    auto* gen_oracle = add(app, "gen-oracle-dataset", "Export oracle-world renders in the dataset layout", go);
    gen_oracle->add_option("--k", ok, "Identities")->capture_default_str()->check(CLI::PositiveNumber);
    gen_oracle->add_option("--m", om, "Images per identity")->capture_default_str()->check(CLI::PositiveNumber);
    gen_oracle->add_option("--exclude-from", exclude_from, "Manifests whose world identities are never drawn")
        ->check(CLI::ExistingFile);

    // mix-datasets
    Common mx;
    std::string mix_syn, mix_real;
    std::optional<int> real_count;
    std::optional<double> real_fraction;
    auto* mix = add(app, "mix-datasets", "Merge synthetic identities with a seeded subset of real ones", mx);
    mix->add_option("--synthetic", mix_syn, "Synthetic manifest")->required()->check(CLI::ExistingFile);
    mix->add_option("--real", mix_real, "Real manifest")->required()->check(CLI::ExistingFile);
    auto* rc = mix->add_option("--real-count", real_count, "Real identities to include");
    mix->add_option("--real-fraction", real_fraction, "Fraction of real identities to include")->excludes(rc)
        ->check(CLI::Range(0.0, 1.0));

    // make-protocol
    Common mp;
    std::string proto_manifest;
    ProtocolOptions po;
    auto* make_proto = add(app, "make-protocol", "Balanced verification pairs from a manifest (writes pairs.txt)", mp);
    make_proto->add_option("--manifest", proto_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    make_proto->add_option("--folds", po.n_folds, "Folds")->capture_default_str();
    make_proto->add_option("--positives", po.positives_per_fold, "Same-identity pairs per fold")->capture_default_str();
    make_proto->add_option("--negatives", po.negatives_per_fold, "Different-identity pairs per fold")->capture_default_str();

    // train-recognizer
    Common tr;
    std::string tr_manifest, tr_validation;
    std::optional<double> head_s, head_m, tr_lr;
    std::optional<int> epochs, patience;
    auto* train_rec = add(app, "train-recognizer", "Train the margin-softmax recognizer on a dataset", tr);
    train_rec->add_option("--config", tr.config, "INI file ([recognizer])")->check(CLI::ExistingFile);
    train_rec->add_option("--manifest", tr_manifest, "Training manifest")->required()->check(CLI::ExistingFile);
    train_rec->add_option("--validation", tr_validation, "Validation pairs for early stopping")->check(CLI::ExistingFile);
    train_rec->add_option("--s", head_s, "Feature scale");
    train_rec->add_option("--m", head_m, "Angular margin (rad)");
    train_rec->add_option("--lr", tr_lr, "Learning rate");
    train_rec->add_option("--epochs", epochs, "Maximum epochs");
    train_rec->add_option("--patience", patience, "Epochs without improvement before stopping");

    // eval-verification
    Common ev;
    std::string ev_pairs, ev_embedder = "toy-cnn", ev_checkpoint;
    auto* eval = add(app, "eval-verification", "Fold-wise verification accuracy on a pairs file", ev);
    eval->add_option("--pairs", ev_pairs, "Pairs file; image paths relative to its directory")->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--embedder", ev_embedder, "Embedding provider: toy-cnn, oracle, oracle-decoded")->capture_default_str();
    eval->add_option("--checkpoint", ev_checkpoint, "Embedder or recognizer checkpoint")->check(CLI::ExistingFile);

    // attack
    Common at;
    std::string at_model, at_members, at_nonmembers, at_variant = "margin";
    int at_bins = 20, at_max = 600;
    auto* attack = add(app, "attack", "Entropy membership attack against a recognizer", at);
    attack->add_option("--model", at_model, "Recognizer checkpoint")->required()->check(CLI::ExistingFile);
    attack->add_option("--members", at_members, "Manifest of member (training) images")->required()->check(CLI::ExistingFile);
    attack->add_option("--nonmembers", at_nonmembers, "Manifest of non-member images")->required()->check(CLI::ExistingFile);
    attack->add_option("--variant", at_variant, "margin or no-margin")->capture_default_str()
        ->check(CLI::IsMember({"margin", "no-margin"}));
    attack->add_option("--bins", at_bins, "Histogram bins")->capture_default_str()->check(CLI::PositiveNumber);
    attack->add_option("--max-members", at_max, "Member images sampled")->capture_default_str()->check(CLI::PositiveNumber);

    // frechet
    Common fr;
    std::vector<std::string> fr_sets;
    std::string fr_space = "generic", fr_checkpoint, fr_generic;
    int fr_steps = 400, fr_max = 1000;
    auto* frechet = add(app, "frechet", "Pairwise Frechet distances between datasets", fr);
    frechet->add_option("--datasets", fr_sets, "Manifests (at least two)")->required()->expected(2, -1)
        ->check(CLI::ExistingFile);
    frechet->add_option("--space", fr_space, "generic or identity")->capture_default_str()
        ->check(CLI::IsMember({"generic", "identity"}));
    frechet->add_option("--checkpoint", fr_checkpoint, "Identity space: toy-cnn checkpoint (oracle embedder if omitted)")
        ->check(CLI::ExistingFile);
    frechet->add_option("--generic-checkpoint", fr_generic, "Generic space: trained feature net (trained if omitted)")
        ->check(CLI::ExistingFile);
    frechet->add_option("--generic-steps", fr_steps, "Training steps for the generic net")->capture_default_str();
    frechet->add_option("--max-images", fr_max, "Images sampled per dataset")->capture_default_str();

    // run-pipeline
    Common rp;
    std::vector<std::string> skip;
    std::optional<std::uint64_t> rp_seed;
    auto* pipe = app.add_subcommand("run-pipeline", "Run every stage under one output root");
    pipe->add_option("--config", rp.config, "Experiment INI file")->required();
    pipe->add_option("--out", rp.out, "Output root")->required();
    pipe->add_option("--seed", rp_seed, "Override experiment.seed");
    pipe->add_option("--skip", skip, "Stages to skip (outputs must already exist)")
        ->check(CLI::IsMember({"train-gan", "gen-dataset", "train-recognizer", "eval-verification", "attack", "frechet"}));

    // print-config
    std::string pc_config;
    auto* print_cfg = app.add_subcommand("print-config", "Print the resolved configuration");
    print_cfg->add_option("--config", pc_config, "Experiment INI file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const OracleWorldSpec world;
        if (*train_gan) {
            auto cfg = base_config(tg.config);
            if (steps > 0) cfg.train.steps = static_cast<int>(steps);
            cfg.seed = tg.seed;
            cfg.validate();
            TrainConfig tc = cfg.train;
            tc.seed = derive_seed(cfg.seed, kSeedTrain);
            const auto emb = make_embedder(tc.embedder, cfg.world.spec, tc.embedder_checkpoint);
            const auto pose = make_pose_estimator(tc.pose_estimator, cfg.world.spec, tc.pose_checkpoint);
            OracleRealSource source(cfg.world.spec, identity_pools(cfg).real);
            TrainPaths paths{tg.out, {}};
            if (!resume.empty()) paths.resume_from = resume;
            detail::write_text(fs::path(tg.out) / "config.resolved.ini", resolved_config(cfg));
            const auto r = train(GanModel(cfg.gan, derive_seed(cfg.seed, kSeedGan)), tc, *emb, *pose, source, paths,
                                 [](const StepMetrics& m) {
                                     if (m.step % 100 == 0)
                                         say("step " + std::to_string(m.step) + " d " + std::to_string(m.d_loss) + " g " +
                                             std::to_string(m.g_loss));
                                 });
            const auto rep =
                evaluate_disentanglement(GanModel::load(r.checkpoint), *emb, *pose, 200, derive_seed(cfg.seed, 0xe7));
            write_json(fs::path(tg.out) / "disentanglement.json", rep.to_json());
            std::cout << rep.to_json().dump(2) << '\n';
        } else if (*gen) {
            GenerateOptions g;
            g.k = k;
            g.m = m;
            g.seed = gd.seed;
            g.synthesis_noise = !no_noise;
            const auto man = generate_dataset(checkpoint, g, gd.out);
            std::cout << man.n_images() << " images, " << man.n_identities() << " identities -> " << gd.out << '\n';
        } else if (*gen_oracle) {
            OracleExportOptions o;
            o.k = ok;
            o.m = om;
            o.seed = go.seed;
            for (const auto& p : exclude_from)
                for (const auto& e : read_manifest(p).identities)
                    if (e.world_identity) o.exclude.push_back(*e.world_identity);
            const auto man = export_oracle_dataset(world, o, go.out);
            std::cout << man.n_images() << " images, " << man.n_identities() << " identities -> " << go.out << '\n';
        } else if (*mix) {
            const auto man = mix_datasets({mix_syn, mix_real, real_count, real_fraction}, mx.seed, mx.out);
            std::cout << man.n_images() << " images, " << man.n_identities() << " identities -> " << mx.out << '\n';
        } else if (*make_proto) {
            po.seed = mp.seed;
            fs::create_directories(mp.out);
            const auto p = make_protocol(proto_manifest, po, mp.out);
            write_protocol(p, fs::path(mp.out) / "pairs.txt");
            std::cout << p.pairs.size() << " pairs -> " << (fs::path(mp.out) / "pairs.txt").string() << '\n';
        } else if (*train_rec) {
            auto cfg = base_config(tr.config);
            auto head = cfg.recognizer.head;
            auto rcfg = cfg.recognizer.train;
            if (head_s) head.s = *head_s;
            if (head_m) head.m = *head_m;
            if (tr_lr) rcfg.lr = *tr_lr;
            if (epochs) rcfg.max_epochs = *epochs;
            if (patience) rcfg.patience = *patience;
            rcfg.seed = tr.seed;
            std::optional<fs::path> val;
            if (!tr_validation.empty()) val = tr_validation;
            fs::create_directories(tr.out);
            const auto r = train_recognizer(tr_manifest, head, rcfg, fs::path(tr.out) / "recognizer.sidarch", val);
            nlohmann::ordered_json j{{"epochs", r.epochs.size()}, {"best_epoch", r.best_epoch}, {"final_loss", r.final_loss}};
            if (r.best_validation) j["best_validation_accuracy"] = *r.best_validation;
            write_json(fs::path(tr.out) / "training.json", j);
            std::cout << j.dump(2) << '\n';
        } else if (*eval) {
            const auto emb = make_embedder(ev_embedder, world, ev_checkpoint);
            const fs::path pairs(ev_pairs);
            const auto r = evaluate_verification(*emb, read_protocol(pairs), pairs.parent_path());
            write_json(fs::path(ev.out) / "report.json", r.to_json());
            detail::write_text(fs::path(ev.out) / "roc.txt", detail::roc_table(r));
            std::printf("accuracy %.4f\n", r.accuracy);
        } else if (*attack) {
            const auto model = MarginClassifier::load(at_model);
            const auto mem = detail::take(load_dataset(at_members), at_max, derive_seed(at.seed, kSeedAttack));
            const auto non = load_dataset(at_nonmembers);
            const AttackSamples ms{model.embedder().embed(mem.images), mem.labels, mem.paths};
            const AttackSamples ns{model.embedder().embed(non.images), {}, non.paths};
            const auto r = run_attack(model.class_weights(), model.head(), ms, ns, parse_attack_variant(at_variant), at_bins);
            write_json(fs::path(at.out) / "report.json", r.to_json());
            detail::write_text(fs::path(at.out) / "histogram.txt", r.histogram_table());
            std::printf("variant %s member_fraction %.4f auc %.4f\n", at_variant.c_str(), r.member_fraction, r.auc);
        } else if (*frechet) {
            std::vector<fs::path> sets(fr_sets.begin(), fr_sets.end());
            std::unique_ptr<FeatureSpace> space;
            if (fr_space == "identity") {
                space = std::make_unique<IdentitySpace>(std::shared_ptr<const EmbeddingProvider>(
                    make_embedder(fr_checkpoint.empty() ? "oracle" : "toy-cnn", world, fr_checkpoint)));
            } else if (!fr_generic.empty()) {
                space = std::make_unique<GenericFeatureNet>(GenericFeatureNet::load(fr_generic));
            } else {
                auto net = train_generic_feature_net(world, fr_steps, 32, fr.seed);
                net.save(fs::path(fr.out) / "generic.sidarch");
                space = std::make_unique<GenericFeatureNet>(std::move(net));
            }
            const auto mtx = distance_matrix(sets, *space, fr_max, fr.seed);
            write_json(fs::path(fr.out) / ("frechet_" + fr_space + ".json"), mtx.to_json());
            detail::write_text(fs::path(fr.out) / ("table_" + fr_space + ".txt"), table_report(mtx, mtx));
            std::cout << table_report(mtx, mtx);
        } else if (*pipe) {
            auto cfg = load_config(rp.config);
            if (rp_seed) cfg.seed = *rp_seed;
            PipelineOptions o;
            o.out = rp.out;
            for (const auto& s : skip) o.skip.insert(parse_stage(s));
            o.log = say;
            const auto r = run_pipeline(cfg, o);
            std::cout << r.summary.dump(2) << '\n';
        } else if (*print_cfg) {
            std::cout << resolved_config(pc_config.empty() ? base_config("") : load_config(pc_config));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
