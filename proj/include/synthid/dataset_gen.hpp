#pragma once

// Labelled identity datasets on disk.
//
// Layout: <dir>/manifest.json plus <dir>/id_<label>/img_<j>.png. Image paths
// in a manifest are relative to the manifest's directory. The manifest is
// written last, via a temporary file and rename, so a readable manifest
// implies a complete dataset.

#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/digest.hpp"
#include "synthid/gan_core.hpp"
#include "synthid/image_io.hpp"
#include "synthid/oracle_world.hpp"

namespace synthid {

inline constexpr int kManifestFormatVersion = 1;

struct IdentityEntry {
    int label = 0;
    std::string source;          // "synthetic", "oracle" or "real"
    std::string z1_digest;       // synthetic only
    std::optional<double> nearest_z1_distance;
    std::optional<int> world_identity;  // oracle renders: identity index in the world
    std::optional<int> origin_label;    // label in the manifest this entry was mixed from
    std::vector<std::string> images;
};

struct DatasetManifest {
    int format_version = kManifestFormatVersion;
    std::string kind;  // "synthetic", "oracle" or "mixed"
    int resolution = 0;
    int channels = 3;
    std::string generator_digest;  // empty when not generated by a GAN
    std::uint64_t seed = 0;
    std::vector<IdentityEntry> identities;

    int n_identities() const { return static_cast<int>(identities.size()); }
    int n_images() const {
        int n = 0;
        for (const auto& e : identities) n += static_cast<int>(e.images.size());
        return n;
    }
    /// Realisations per identity, or nullopt when counts differ.
    std::optional<int> realisations() const {
        if (identities.empty()) return std::nullopt;
        const auto m = identities.front().images.size();
        for (const auto& e : identities)
            if (e.images.size() != m) return std::nullopt;
        return static_cast<int>(m);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["format_version"] = format_version;
        j["kind"] = kind;
        j["n_identities"] = n_identities();
        const auto m = realisations();
        j["realisations"] = m ? nlohmann::ordered_json(*m) : nlohmann::ordered_json(nullptr);
        j["n_images"] = n_images();
        j["resolution"] = resolution;
        j["channels"] = channels;
        j["generator_digest"] = generator_digest;
        j["seed"] = seed;
        auto& ids = j["identities"] = nlohmann::ordered_json::array();
        for (const auto& e : identities) {
            nlohmann::ordered_json o;
            o["label"] = e.label;
            o["source"] = e.source;
            if (!e.z1_digest.empty()) o["z1_digest"] = e.z1_digest;
            if (e.nearest_z1_distance) o["nearest_z1_distance"] = *e.nearest_z1_distance;
            if (e.world_identity) o["world_identity"] = *e.world_identity;
            if (e.origin_label) o["origin_label"] = *e.origin_label;
            o["images"] = e.images;
            ids.push_back(std::move(o));
        }
        return j;
    }

    static DatasetManifest from_json(const nlohmann::ordered_json& j) {
        DatasetManifest m;
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kManifestFormatVersion)
            throw ConfigError("unsupported manifest format version " + std::to_string(m.format_version));
        m.kind = j.at("kind").get<std::string>();
        m.resolution = j.at("resolution").get<int>();
        m.channels = j.at("channels").get<int>();
        m.generator_digest = j.at("generator_digest").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& o : j.at("identities")) {
            IdentityEntry e;
            e.label = o.at("label").get<int>();
            e.source = o.at("source").get<std::string>();
            if (o.contains("z1_digest")) e.z1_digest = o["z1_digest"].get<std::string>();
            if (o.contains("nearest_z1_distance")) e.nearest_z1_distance = o["nearest_z1_distance"].get<double>();
            if (o.contains("world_identity")) e.world_identity = o["world_identity"].get<int>();
            if (o.contains("origin_label")) e.origin_label = o["origin_label"].get<int>();
            e.images = o.at("images").get<std::vector<std::string>>();
            m.identities.push_back(std::move(e));
        }
        if (j.at("n_identities").get<int>() != m.n_identities() || j.at("n_images").get<int>() != m.n_images())
            throw ConfigError("manifest counts do not match its identity list");
        for (int i = 0; i < m.n_identities(); ++i)
            if (m.identities[static_cast<std::size_t>(i)].label != i)
                throw ConfigError("manifest labels must be 0..K-1 in order");
        return m;
    }

    std::string serialize() const { return to_json().dump(2) + "\n"; }
};

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << m.serialize();
        if (!out) throw IoError("short write on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest " + path.string());
    try {
        return DatasetManifest::from_json(nlohmann::ordered_json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
    }
}

/// Every referenced image exists relative to `root`.
inline void check_manifest_files(const DatasetManifest& m, const std::filesystem::path& root) {
    for (const auto& e : m.identities)
        for (const auto& p : e.images)
            if (!std::filesystem::exists(root / p)) throw IoError("manifest references missing image " + (root / p).string());
}

/// A loaded dataset: images with integer labels.
struct LabelledImages {
    ImageBatch images;
    std::vector<int> labels;
    std::vector<std::string> paths;
};

/// Load all (or only the listed) identities of a manifest.
inline LabelledImages load_dataset(const std::filesystem::path& manifest_path, const std::vector<int>& only = {}) {
    const auto m = read_manifest(manifest_path);
    const auto root = manifest_path.parent_path();
    LabelledImages out;
    std::vector<Tensor<float>> imgs;
    for (const auto& e : m.identities) {
        if (!only.empty() && std::find(only.begin(), only.end(), e.label) == only.end()) continue;
        for (const auto& p : e.images) {
            auto t = read_png(root / p);
            if (t.shape != Shape{m.channels, m.resolution, m.resolution})
                throw ConfigError("image " + (root / p).string() + " does not match the manifest resolution");
            imgs.push_back(std::move(t));
            out.labels.push_back(e.label);
            out.paths.push_back((root / p).string());
        }
    }
    const int n = static_cast<int>(imgs.size());
    out.images.pixels = Tensor<float>({n, m.channels, m.resolution, m.resolution});
    const std::size_t per = static_cast<std::size_t>(m.channels) * m.resolution * m.resolution;
    for (int i = 0; i < n; ++i)
        std::copy(imgs[i].data.begin(), imgs[i].data.end(), out.images.pixels.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    return out;
}

namespace detail {

inline std::string image_rel_path(int label, int j) {
    return "id_" + std::to_string(label) + "/img_" + std::to_string(j) + ".png";
}

/// Write one identity's images; rethrows I/O failures naming the last complete identity.
inline void write_identity_images(const std::filesystem::path& out_dir, const ImageBatch& batch, IdentityEntry& entry,
                                  int last_complete) {
    try {
        std::filesystem::create_directories(out_dir / ("id_" + std::to_string(entry.label)));
        for (int j = 0; j < batch.batch(); ++j) {
            const auto rel = image_rel_path(entry.label, j);
            write_png(out_dir / rel, batch.image(j));
            entry.images.push_back(rel);
        }
    } catch (const std::exception& e) {
        throw IoError(std::string("dataset output incomplete (last completed identity: ") +
                      (last_complete < 0 ? "none" : std::to_string(last_complete)) + "): " + e.what());
    }
}

} // namespace detail

using CropHook = std::function<ImageBatch(ImageBatch)>;

struct GenerateOptions {
    int k = 50;
    int m = 20;
    std::uint64_t seed = 0;
    bool synthesis_noise = true;
    CropHook crop;  // applied to each identity's batch before writing; none by default
};

/// Identity code for label k of a dataset seeded with `seed`.
inline std::vector<float> dataset_z1(std::uint64_t seed, int n_z, int label) {
    Rng rng(derive_seed(seed, 1, static_cast<std::uint64_t>(label)));
    std::vector<float> z(static_cast<std::size_t>(n_z));
    for (auto& v : z) v = static_cast<float>(rng.normal());
    return z;
}

inline std::vector<float> dataset_z2(std::uint64_t seed, int n_z, int label, int j) {
    Rng rng(derive_seed(seed, 2, (static_cast<std::uint64_t>(label) << 32) | static_cast<std::uint32_t>(j)));
    std::vector<float> z(static_cast<std::size_t>(n_z));
    for (auto& v : z) v = static_cast<float>(rng.normal());
    return z;
}

/// Fix z1 per identity, resample z2 per realisation, write K*M images and the manifest.
inline DatasetManifest generate_dataset(const std::filesystem::path& checkpoint, const GenerateOptions& opt,
                                        const std::filesystem::path& out_dir) {
    if (opt.k < 1 || opt.m < 1) throw ArgumentError("generate_dataset: K and M must be >= 1");
    const auto model = GanModel::load(checkpoint);
    const int nz = model.config().n_z;

    DatasetManifest man;
    man.kind = "synthetic";
    man.resolution = model.config().resolution;
    man.channels = model.config().channels;
    man.generator_digest = git_blob_digest(read_file_bytes(checkpoint));
    man.seed = opt.seed;

    std::vector<std::vector<float>> codes;
    for (int k = 0; k < opt.k; ++k) codes.push_back(dataset_z1(opt.seed, nz, k));

    std::filesystem::create_directories(out_dir);
    for (int k = 0; k < opt.k; ++k) {
        IdentityEntry e;
        e.label = k;
        e.source = "synthetic";
        e.z1_digest = sha256_of<float>(codes[static_cast<std::size_t>(k)]);
        double best = std::numeric_limits<double>::infinity();
        for (int o = 0; o < opt.k; ++o) {
            if (o == k) continue;
            double d = 0;
            for (int i = 0; i < nz; ++i) {
                const double t = codes[static_cast<std::size_t>(k)][i] - codes[static_cast<std::size_t>(o)][i];
                d += t * t;
            }
            best = std::min(best, std::sqrt(d));
        }
        if (opt.k > 1) e.nearest_z1_distance = best;

        std::vector<std::vector<float>> z1s, z2s;
        std::vector<std::uint64_t> keys;
        for (int j = 0; j < opt.m; ++j) {
            z1s.push_back(codes[static_cast<std::size_t>(k)]);
            z2s.push_back(dataset_z2(opt.seed, nz, k, j));
            keys.push_back(derive_seed(opt.seed, 3, (static_cast<std::uint64_t>(k) << 32) | static_cast<std::uint32_t>(j)));
        }
        ImageBatch batch;
        constexpr int kChunk = 64;
        std::vector<Tensor<float>> parts;
        for (int j = 0; j < opt.m; j += kChunk) {
            const int end = std::min(opt.m, j + kChunk);
            const std::vector<std::vector<float>> a(z1s.begin() + j, z1s.begin() + end), b(z2s.begin() + j, z2s.begin() + end);
            const auto ks = opt.synthesis_noise ? std::vector<std::uint64_t>(keys.begin() + j, keys.begin() + end)
                                                : std::vector<std::uint64_t>{};
            parts.push_back(model.generate_images(stack_latents(a), stack_latents(b), ks).pixels);
        }
        batch.pixels = cat_rows(parts);
        if (opt.crop) batch = opt.crop(std::move(batch));
        detail::write_identity_images(out_dir, batch, e, k - 1);
        man.identities.push_back(std::move(e));
    }
    write_manifest(man, out_dir / "manifest.json");
    return man;
}

struct OracleExportOptions {
    int k = 50;
    int m = 20;
    std::uint64_t seed = 0;
    std::vector<int> identities;  // world identity indices; drawn from `seed` when empty
    std::vector<int> exclude;     // never drawn
};

/// Export oracle renders in the manifest layout.
inline DatasetManifest export_oracle_dataset(const OracleWorldSpec& world, const OracleExportOptions& opt,
                                             const std::filesystem::path& out_dir) {
    if (opt.m < 1) throw ArgumentError("export_oracle_dataset: M must be >= 1");
    const auto ids = opt.identities.empty() ? sample_identity_pool(world, opt.k, opt.seed, opt.exclude) : opt.identities;
    if (ids.empty()) throw ArgumentError("export_oracle_dataset: no identities");
    DatasetManifest man;
    man.kind = "oracle";
    man.resolution = world.resolution;
    man.channels = OracleWorldSpec::kChannels;
    man.seed = opt.seed;
    std::filesystem::create_directories(out_dir);
    for (std::size_t k = 0; k < ids.size(); ++k) {
        Rng rng(derive_seed(opt.seed, 4, k));
        std::vector<OracleFactors> fs(static_cast<std::size_t>(opt.m));
        for (auto& f : fs) {
            f.identity = world.identity(ids[k]);
            f.pose = world.sample_pose(rng);
        }
        IdentityEntry e;
        e.label = static_cast<int>(k);
        e.source = "oracle";
        e.world_identity = ids[k];
        detail::write_identity_images(out_dir, render_oracle(fs, world), e, static_cast<int>(k) - 1);
        man.identities.push_back(std::move(e));
    }
    write_manifest(man, out_dir / "manifest.json");
    return man;
}

struct MixSpec {
    std::filesystem::path synthetic;  // manifest paths
    std::filesystem::path real;
    std::optional<int> real_count;
    std::optional<double> real_fraction;  // of the real manifest's identities
};

/// Merge a seeded subset of real identities (labels 0..R-1) with all
/// synthetic identities (labels R..). Paths are rewritten relative to out_dir.
inline DatasetManifest mix_datasets(const MixSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
    const auto syn = read_manifest(spec.synthetic);
    const auto real = read_manifest(spec.real);
    if (syn.resolution != real.resolution || syn.channels != real.channels)
        throw ArgumentError("mix_datasets: image formats differ");
    int r = 0;
    if (spec.real_count && spec.real_fraction) throw ArgumentError("mix_datasets: give a real count or a fraction, not both");
    if (spec.real_count) r = *spec.real_count;
    if (spec.real_fraction) {
        if (!(*spec.real_fraction >= 0 && *spec.real_fraction <= 1)) throw ArgumentError("mix_datasets: fraction outside [0,1]");
        r = static_cast<int>(std::lround(*spec.real_fraction * real.n_identities()));
    }
    if (r < 0 || r > real.n_identities()) throw ArgumentError("mix_datasets: real identity count out of range");

    std::vector<int> order(static_cast<std::size_t>(real.n_identities()));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 5));
    std::shuffle(order.begin(), order.end(), rng.engine());
    order.resize(static_cast<std::size_t>(r));
    std::sort(order.begin(), order.end());

    std::filesystem::create_directories(out_dir);
    const auto base = std::filesystem::weakly_canonical(out_dir);
    auto rebase = [&](const std::filesystem::path& manifest, const std::string& rel) {
        return std::filesystem::weakly_canonical(manifest.parent_path() / rel).lexically_relative(base).generic_string();
    };

    DatasetManifest out;
    out.kind = "mixed";
    out.resolution = syn.resolution;
    out.channels = syn.channels;
    out.generator_digest = syn.generator_digest;
    out.seed = seed;
    std::set<std::string> seen;
    auto add = [&](const IdentityEntry& src, const std::filesystem::path& manifest, const std::string& source) {
        IdentityEntry e = src;
        e.origin_label = src.label;
        e.label = out.n_identities();
        e.source = source;
        e.images.clear();
        for (const auto& p : src.images) {
            auto q = rebase(manifest, p);
            if (!seen.insert(q).second) throw ArgumentError("mix_datasets: image path " + q + " appears twice");
            e.images.push_back(std::move(q));
        }
        out.identities.push_back(std::move(e));
    };
    for (int i : order) add(real.identities[static_cast<std::size_t>(i)], spec.real, "real");
    for (const auto& e : syn.identities) add(e, spec.synthetic, e.source);
    write_manifest(out, out_dir / "manifest.json");
    return out;
}

} // namespace synthid
