#pragma once

// Experiment configuration: an INI file with fixed sections, every key known
// in advance. Values may be overridden from the environment as
// SYNTHID_<SECTION>_<KEY> (upper case), e.g. SYNTHID_TRAIN_STEPS=200.
// The resolved form lists every key, defaults included.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "synthid/dist_metrics.hpp"
#include "synthid/privacy_attack.hpp"
#include "synthid/recognition.hpp"
#include "synthid/training.hpp"

extern char** environ;

namespace synthid {

inline constexpr const char* kEnvPrefix = "SYNTHID_";

struct WorldSection {
    OracleWorldSpec spec;
    int real_pool = 200;  // identities the GAN sees as real images
};

struct DatasetSection {
    GenerateOptions gen;
    int test_identities = 100;  // held-out oracle identities for verification and attack
    int test_images = 6;
    int validation_identities = 50;
    int validation_images = 6;
};

struct RecognizerSection {
    MarginHeadConfig head;
    RecognizerTrainConfig train;
};

struct AttackSection {
    AttackVariant variant = AttackVariant::Margin;
    int bins = 20;
    int max_members = 600;  // member images drawn from the training set
};

struct FrechetSection {
    int generic_steps = 400;
    int max_images = 1000;  // per dataset
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    WorldSection world;
    GanConfig gan;
    TrainConfig train;
    DatasetSection dataset;
    RecognizerSection recognizer;
    ProtocolOptions protocol;
    AttackSection attack;
    FrechetSection frechet;

    ExperimentConfig() {
        recognizer.head.s = 16.0;
        recognizer.train.lr = 3e-3;
        dataset.gen.k = 450;
        dataset.gen.m = 20;
        protocol.positives_per_fold = 30;
        protocol.negatives_per_fold = 30;
    }

    void validate() const {
        gan.validate();
        train.validate();
        recognizer.train.validate();
        MarginHeadConfig h = recognizer.head;
        h.n_classes = std::max(1, h.n_classes);
        h.validate();
        if (gan.resolution != world.spec.resolution) throw ConfigError("gan.resolution must equal world.resolution");
        if (world.real_pool < 1) throw ConfigError("world.real_pool must be >= 1");
        if (dataset.gen.k < 2 || dataset.gen.m < 1) throw ConfigError("dataset: k >= 2 and m >= 1 required");
        if (dataset.test_identities < 2 || dataset.test_images < 2)
            throw ConfigError("dataset: test set needs >= 2 identities with >= 2 images");
        if (dataset.validation_identities < 2 || dataset.validation_images < 2)
            throw ConfigError("dataset: validation set needs >= 2 identities with >= 2 images");
        if (world.real_pool + dataset.test_identities + dataset.validation_identities > world.spec.identity_count())
            throw ConfigError("world has too few identities for real pool + test + validation");
        if (protocol.n_folds < 2 || protocol.positives_per_fold < 1 || protocol.negatives_per_fold < 1)
            throw ConfigError("protocol: need >= 2 folds and >= 1 pair of each kind per fold");
        if (attack.bins < 1 || attack.max_members < 1) throw ConfigError("attack: bins and max_members must be >= 1");
        if (frechet.generic_steps < 1 || frechet.max_images < 2) throw ConfigError("frechet: bad sizes");
    }
};

namespace detail {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T v{};
    in >> v;
    if (!in || !(in >> std::ws).eof()) throw ConfigError("config key " + key + ": cannot parse '" + text + "'");
    return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError("config key " + key + ": expected a boolean, got '" + text + "'");
}

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& text) {
    return text;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_value<int>(key, item));
    if (out.empty()) throw ConfigError("config key " + key + ": empty list");
    return out;
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

struct Binding {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

// section -> key -> binding, in output order.
using Schema = std::vector<std::pair<std::string, std::vector<std::pair<std::string, Binding>>>>;

template <typename T>
Binding bind_value(T& field, const std::string& name) {
    return {[&field, name](const std::string& s) { field = parse_value<T>(name, s); },
            [&field] {
                if constexpr (std::is_same_v<T, bool>) return std::string(field ? "true" : "false");
                else if constexpr (std::is_same_v<T, std::string>) return field;
                else if constexpr (std::is_floating_point_v<T>) return format_double(field);
                else return std::to_string(field);
            }};
}

inline Binding bind_path(std::filesystem::path& field) {
    return {[&field](const std::string& s) { field = s; }, [&field] { return field.string(); }};
}

inline Binding bind_list(std::vector<int>& field, const std::string& name) {
    return {[&field, name](const std::string& s) { field = parse_int_list(name, s); }, [&field] { return join_ints(field); }};
}

inline Schema schema(ExperimentConfig& c) {
    auto& w = c.world.spec;
    auto& l = c.train.losses;
    auto& rh = c.recognizer.head;
    auto& rt = c.recognizer.train;
    Binding objective{[&l](const std::string& s) { l.objective = parse_gan_objective(s); },
                      [&l] { return to_string(l.objective); }};
    Binding variant{[&c](const std::string& s) { c.attack.variant = parse_attack_variant(s); },
                    [&c] { return to_string(c.attack.variant); }};
    return {
        {"experiment", {{"seed", bind_value(c.seed, "experiment.seed")}}},
        {"world",
         {{"resolution", bind_value(w.resolution, "world.resolution")},
          {"max_shift", bind_value(w.max_shift, "world.max_shift")},
          {"max_roll", bind_value(w.max_roll, "world.max_roll")},
          {"palette_seed", bind_value(w.seed, "world.palette_seed")},
          {"real_pool", bind_value(c.world.real_pool, "world.real_pool")}}},
        {"gan",
         {{"n_z", bind_value(c.gan.n_z, "gan.n_z")},
          {"n_w", bind_value(c.gan.n_w, "gan.n_w")},
          {"resolution", bind_value(c.gan.resolution, "gan.resolution")},
          {"synth_channels", bind_list(c.gan.synth_channels, "gan.synth_channels")},
          {"disc_channels", bind_list(c.gan.disc_channels, "gan.disc_channels")}}},
        {"losses",
         {{"lambda_aux", bind_value(l.lambda_aux, "losses.lambda_aux")},
          {"tau_pull", bind_value(l.tau_pull, "losses.tau_pull")},
          {"tau_push", bind_value(l.tau_push, "losses.tau_push")},
          {"tau_vary", bind_value(l.tau_vary, "losses.tau_vary")},
          {"tau_match", bind_value(l.tau_match, "losses.tau_match")},
          {"objective", objective},
          {"r1", bind_value(l.r1, "losses.r1")},
          {"r1_gamma", bind_value(l.r1_gamma, "losses.r1_gamma")},
          {"r1_interval", bind_value(l.r1_interval, "losses.r1_interval")}}},
        {"train",
         {{"steps", bind_value(c.train.steps, "train.steps")},
          {"batch_size", bind_value(c.train.batch_size, "train.batch_size")},
          {"lr_g", bind_value(c.train.lr_g, "train.lr_g")},
          {"lr_d", bind_value(c.train.lr_d, "train.lr_d")},
          {"beta1", bind_value(c.train.beta1, "train.beta1")},
          {"beta2", bind_value(c.train.beta2, "train.beta2")},
          {"checkpoint_interval", bind_value(c.train.checkpoint_interval, "train.checkpoint_interval")},
          {"synthesis_noise", bind_value(c.train.synthesis_noise, "train.synthesis_noise")}}},
        {"providers",
         {{"embedder", bind_value(c.train.embedder, "providers.embedder")},
          {"pose_estimator", bind_value(c.train.pose_estimator, "providers.pose_estimator")},
          {"embedder_checkpoint", bind_path(c.train.embedder_checkpoint)},
          {"pose_checkpoint", bind_path(c.train.pose_checkpoint)}}},
        {"dataset",
         {{"k", bind_value(c.dataset.gen.k, "dataset.k")},
          {"m", bind_value(c.dataset.gen.m, "dataset.m")},
          {"synthesis_noise", bind_value(c.dataset.gen.synthesis_noise, "dataset.synthesis_noise")},
          {"test_identities", bind_value(c.dataset.test_identities, "dataset.test_identities")},
          {"test_images", bind_value(c.dataset.test_images, "dataset.test_images")},
          {"validation_identities", bind_value(c.dataset.validation_identities, "dataset.validation_identities")},
          {"validation_images", bind_value(c.dataset.validation_images, "dataset.validation_images")}}},
        {"recognizer",
         {{"s", bind_value(rh.s, "recognizer.s")},
          {"m", bind_value(rh.m, "recognizer.m")},
          {"lr", bind_value(rt.lr, "recognizer.lr")},
          {"batch_size", bind_value(rt.batch_size, "recognizer.batch_size")},
          {"max_epochs", bind_value(rt.max_epochs, "recognizer.max_epochs")},
          {"patience", bind_value(rt.patience, "recognizer.patience")},
          {"max_steps", bind_value(rt.max_steps, "recognizer.max_steps")},
          {"conv_channels", bind_list(rt.net.conv_channels, "recognizer.conv_channels")},
          {"out_dim", bind_value(rt.net.out_dim, "recognizer.out_dim")}}},
        {"protocol",
         {{"folds", bind_value(c.protocol.n_folds, "protocol.folds")},
          {"positives_per_fold", bind_value(c.protocol.positives_per_fold, "protocol.positives_per_fold")},
          {"negatives_per_fold", bind_value(c.protocol.negatives_per_fold, "protocol.negatives_per_fold")}}},
        {"attack",
         {{"variant", variant},
          {"bins", bind_value(c.attack.bins, "attack.bins")},
          {"max_members", bind_value(c.attack.max_members, "attack.max_members")}}},
        {"frechet",
         {{"generic_steps", bind_value(c.frechet.generic_steps, "frechet.generic_steps")},
          {"max_images", bind_value(c.frechet.max_images, "frechet.max_images")}}},
    };
}

inline Binding* find_binding(Schema& s, const std::string& section, const std::string& key) {
    for (auto& [sec, keys] : s)
        if (sec == section)
            for (auto& [k, b] : keys)
                if (k == key) return &b;
    return nullptr;
}

inline std::string upper(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return s;
}

} // namespace detail

/// Apply SYNTHID_<SECTION>_<KEY> variables. Unknown names are rejected.
inline void apply_env_overrides(ExperimentConfig& cfg, const std::map<std::string, std::string>& env) {
    auto schema = detail::schema(cfg);
    for (const auto& [name, value] : env) {
        if (name.rfind(kEnvPrefix, 0) != 0) continue;
        const auto rest = name.substr(std::string(kEnvPrefix).size());
        detail::Binding* hit = nullptr;
        for (auto& [sec, keys] : schema)
            for (auto& [k, b] : keys)
                if (rest == detail::upper(sec + "_" + k)) hit = &b;
        if (!hit) throw ConfigError("unknown configuration variable " + name);
        hit->set(value);
    }
}

inline std::map<std::string, std::string> process_environment() {
    std::map<std::string, std::string> env;
    for (char** e = environ; e && *e; ++e) {
        const std::string kv(*e);
        const auto eq = kv.find('=');
        if (eq != std::string::npos) env.emplace(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return env;
}

/// Parse INI text on top of the defaults. Unknown sections or keys are errors.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    ExperimentConfig cfg;
    auto schema = detail::schema(cfg);
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError(origin + ": key '" + section + "' outside any section");
        for (const auto& [key, value] : body) {
            auto* b = detail::find_binding(schema, section, key);
            if (!b) throw ConfigError(origin + ": unknown key " + section + "." + key);
            b->set(value.get_value<std::string>());
        }
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    const std::map<std::string, std::string>& env = process_environment()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    auto cfg = parse_config(ss.str(), path.string());
    apply_env_overrides(cfg, env);
    cfg.validate();
    return cfg;
}

/// Every key with its effective value, as INI text.
inline std::string resolved_config(const ExperimentConfig& cfg) {
    ExperimentConfig copy = cfg;
    std::string out;
    for (const auto& [section, keys] : detail::schema(copy)) {
        out += "[" + section + "]\n";
        for (const auto& [k, b] : keys) out += k + " = " + b.get() + "\n";
        out += "\n";
    }
    return out;
}

} // namespace synthid
