#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "synthid/dataset_gen.hpp"

using namespace synthid;
namespace fs = std::filesystem;

namespace {

GanConfig small_config() {
    GanConfig c;
    c.n_z = 8;
    c.n_w = 16;
    c.resolution = 16;
    c.synth_channels = {8, 8, 4};
    c.disc_channels = {4, 8, 8};
    return c;
}

fs::path fresh_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("synthid_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path small_checkpoint(const fs::path& dir) {
    const auto p = dir / "gan.sidarch";
    GanModel(small_config(), 3).save(p);
    return p;
}

} // namespace

TEST(GenerateDataset, CountsAndLayout) {
    const auto dir = fresh_dir("gen_counts");
    GenerateOptions opt;
    opt.k = 3;
    opt.m = 2;
    opt.seed = 11;
    const auto m = generate_dataset(small_checkpoint(dir), opt, dir / "ds");
    EXPECT_EQ(m.n_images(), 6);
    EXPECT_EQ(m.n_identities(), 3);
    ASSERT_TRUE(m.realisations());
    EXPECT_EQ(*m.realisations(), 2);
    for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(m.identities[k].label, k);
        EXPECT_EQ(m.identities[k].images[1], "id_" + std::to_string(k) + "/img_1.png");
    }
    EXPECT_NO_THROW(check_manifest_files(read_manifest(dir / "ds" / "manifest.json"), dir / "ds"));
    const auto data = load_dataset(dir / "ds" / "manifest.json");
    EXPECT_EQ(data.images.batch(), 6);
    EXPECT_EQ(data.labels, (std::vector<int>{0, 0, 1, 1, 2, 2}));
}

TEST(GenerateDataset, DigestsMatchCodes) {
    const auto dir = fresh_dir("gen_digest");
    GenerateOptions opt;
    opt.k = 6;
    opt.m = 1;
    opt.seed = 4;
    const auto m = generate_dataset(small_checkpoint(dir), opt, dir / "ds");
    std::set<std::string> digests;
    for (const auto& e : m.identities) {
        EXPECT_EQ(e.z1_digest, sha256_of<float>(dataset_z1(4, small_config().n_z, e.label)));
        digests.insert(e.z1_digest);
        ASSERT_TRUE(e.nearest_z1_distance);
        EXPECT_GT(*e.nearest_z1_distance, 0.0);
    }
    EXPECT_EQ(digests.size(), 6u);
}

TEST(GenerateDataset, SameSeedSameBytes) {
    const auto dir = fresh_dir("gen_determinism");
    const auto ckpt = small_checkpoint(dir);
    GenerateOptions opt;
    opt.k = 3;
    opt.m = 2;
    opt.seed = 8;
    generate_dataset(ckpt, opt, dir / "a");
    generate_dataset(ckpt, opt, dir / "b");
    EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
    EXPECT_EQ(slurp(dir / "a" / "id_2" / "img_1.png"), slurp(dir / "b" / "id_2" / "img_1.png"));
    opt.seed = 9;
    const auto other = generate_dataset(ckpt, opt, dir / "c");
    EXPECT_NE(other.identities[0].z1_digest, read_manifest(dir / "a" / "manifest.json").identities[0].z1_digest);
}

TEST(GenerateDataset, ImagesWithinIdentityShareCodeAcrossRealisations) {
    // Same z1 and z2 give the same image; only the z2 draw differs between realisations.
    EXPECT_NE(dataset_z2(1, 8, 0, 0), dataset_z2(1, 8, 0, 1));
    EXPECT_EQ(dataset_z1(1, 8, 5), dataset_z1(1, 8, 5));
    EXPECT_NE(dataset_z1(1, 8, 5), dataset_z1(1, 8, 6));
}

TEST(Manifest, RoundTripIsByteIdentical) {
    const auto dir = fresh_dir("manifest_rt");
    DatasetManifest m;
    m.kind = "synthetic";
    m.resolution = 16;
    m.generator_digest = "abc";
    m.seed = 5;
    for (int k = 0; k < 3; ++k) {
        IdentityEntry e;
        e.label = k;
        e.source = "synthetic";
        e.z1_digest = "d" + std::to_string(k);
        e.nearest_z1_distance = 0.25 * (k + 1) + 1e-13;
        e.images = {detail::image_rel_path(k, 0), detail::image_rel_path(k, 1)};
        m.identities.push_back(e);
    }
    write_manifest(m, dir / "a.json");
    write_manifest(read_manifest(dir / "a.json"), dir / "b.json");
    EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
    EXPECT_EQ(slurp(dir / "a.json"), m.serialize());
}

TEST(Manifest, RejectsInconsistentCounts) {
    DatasetManifest m;
    m.kind = "oracle";
    m.resolution = 16;
    IdentityEntry e;
    e.source = "oracle";
    e.images = {"x.png"};
    m.identities.push_back(e);
    auto j = m.to_json();
    j["n_images"] = 2;
    EXPECT_THROW(DatasetManifest::from_json(j), ConfigError);
    j = m.to_json();
    j["identities"][0]["label"] = 3;
    EXPECT_THROW(DatasetManifest::from_json(j), ConfigError);
}

TEST(OracleExport, ExcludedIdentitiesNeverDrawn) {
    const auto dir = fresh_dir("oracle_export");
    OracleWorldSpec w;
    w.resolution = 16;
    std::vector<int> excl;
    for (int i = 0; i < w.identity_count(); i += 2) excl.push_back(i);
    OracleExportOptions opt;
    opt.k = 10;
    opt.m = 2;
    opt.seed = 3;
    opt.exclude = excl;
    const auto m = export_oracle_dataset(w, opt, dir);
    EXPECT_EQ(m.n_images(), 20);
    for (const auto& e : m.identities) {
        ASSERT_TRUE(e.world_identity);
        EXPECT_EQ(*e.world_identity % 2, 1);
    }
}

class MixTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fresh_dir("mix");
        OracleWorldSpec w;
        w.resolution = 16;
        OracleExportOptions real;
        real.k = 10;
        real.m = 2;
        real.seed = 1;
        export_oracle_dataset(w, real, dir_ / "real");
        GenerateOptions syn;
        syn.k = 5;
        syn.m = 2;
        syn.seed = 2;
        generate_dataset(small_checkpoint(dir_), syn, dir_ / "syn");
    }
    MixSpec spec() const { return {dir_ / "syn" / "manifest.json", dir_ / "real" / "manifest.json", {}, {}}; }
    fs::path dir_;
};

TEST_F(MixTest, LabelSpacesDisjointAndCountsAdd) {
    auto s = spec();
    s.real_count = 10;
    const auto m = mix_datasets(s, 7, dir_ / "mixed");
    EXPECT_EQ(m.n_identities(), 15);
    EXPECT_EQ(m.n_images(), 30);
    std::set<int> real_labels, syn_labels;
    for (const auto& e : m.identities) (e.source == "real" ? real_labels : syn_labels).insert(e.label);
    EXPECT_EQ(real_labels.size(), 10u);
    EXPECT_EQ(syn_labels.size(), 5u);
    EXPECT_EQ(*real_labels.rbegin() + 1, *syn_labels.begin());
    EXPECT_NO_THROW(check_manifest_files(m, dir_ / "mixed"));
    EXPECT_EQ(load_dataset(dir_ / "mixed" / "manifest.json").images.batch(), 30);
}

TEST_F(MixTest, ZeroRealFractionKeepsSynthetic) {
    auto s = spec();
    s.real_fraction = 0.0;
    const auto m = mix_datasets(s, 7, dir_ / "mixed0");
    const auto syn = read_manifest(dir_ / "syn" / "manifest.json");
    ASSERT_EQ(m.n_identities(), syn.n_identities());
    for (int k = 0; k < m.n_identities(); ++k) {
        EXPECT_EQ(m.identities[k].label, syn.identities[k].label);
        EXPECT_EQ(m.identities[k].z1_digest, syn.identities[k].z1_digest);
        EXPECT_EQ(m.identities[k].images.size(), syn.identities[k].images.size());
    }
}

TEST_F(MixTest, SubsetIsSeeded) {
    auto s = spec();
    s.real_count = 4;
    auto origins = [](const DatasetManifest& m) {
        std::vector<int> o;
        for (const auto& e : m.identities)
            if (e.source == "real") o.push_back(*e.origin_label);
        return o;
    };
    const auto a = origins(mix_datasets(s, 7, dir_ / "m1"));
    const auto b = origins(mix_datasets(s, 7, dir_ / "m2"));
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.size(), 4u);
}

TEST_F(MixTest, OverlappingPathsRejected) {
    MixSpec s{dir_ / "real" / "manifest.json", dir_ / "real" / "manifest.json", 3, {}};
    EXPECT_THROW(mix_datasets(s, 7, dir_ / "dup"), ArgumentError);
}
