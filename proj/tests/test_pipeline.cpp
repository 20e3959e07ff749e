#include <gtest/gtest.h>

#include <fstream>

#include "synthid/pipeline.hpp"

using namespace synthid;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
[experiment]
seed = 5
[world]
resolution = 16
real_pool = 20
[gan]
n_z = 8
n_w = 16
resolution = 16
synth_channels = 8,8,4
disc_channels = 4,8,8
[train]
steps = 6
batch_size = 4
checkpoint_interval = 4
[dataset]
k = 6
m = 4
test_identities = 8
test_images = 3
validation_identities = 6
validation_images = 3
[recognizer]
max_epochs = 2
patience = 2
conv_channels = 4,8
out_dim = 8
[protocol]
folds = 2
positives_per_fold = 4
negatives_per_fold = 4
[attack]
max_members = 12
[frechet]
generic_steps = 3
max_images = 20
)";

fs::path fresh(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("synthid_pipe_" + name);
    fs::remove_all(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

class PipelineTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        cfg_ = parse_config(kTiny);
        first_ = run_pipeline(cfg_, {fresh("a"), {}, {}});
        second_ = run_pipeline(cfg_, {fresh("b"), {}, {}});
    }
    static inline ExperimentConfig cfg_;
    static inline PipelineResult first_, second_;
};

TEST_F(PipelineTest, ArtifactTreeComplete) {
    const PipelineLayout L{fs::temp_directory_path() / "synthid_pipe_a"};
    EXPECT_EQ(first_.ran.size(), kStages.size());
    for (const auto& p : {L.gan(), L.manifest("synthetic"), L.manifest("test"), L.pairs("test"), L.recognizer(),
                          L.verification(), L.attack(), L.frechet_dir() / "table.txt", L.summary(), L.digests(),
                          L.root / "config.resolved.ini"})
        EXPECT_TRUE(fs::exists(p)) << p;
    const auto digests = detail::read_json(L.digests());
    EXPECT_EQ(digests.at("data/synthetic/manifest.json").get<std::string>(),
              git_blob_digest(slurp(L.manifest("synthetic"))));
}

TEST_F(PipelineTest, SameSeedSameResults) {
    ASSERT_TRUE(first_.verification_accuracy && second_.verification_accuracy);
    EXPECT_EQ(*first_.verification_accuracy, *second_.verification_accuracy);
    const PipelineLayout a{fs::temp_directory_path() / "synthid_pipe_a"}, b{fs::temp_directory_path() / "synthid_pipe_b"};
    for (const auto* name : {"synthetic", "real", "test", "validation"})
        EXPECT_EQ(slurp(a.manifest(name)), slurp(b.manifest(name))) << name;
    EXPECT_EQ(slurp(a.digests()), slurp(b.digests()));
}

TEST_F(PipelineTest, SkippedStagesReuseOutputs) {
    const auto out = fs::temp_directory_path() / "synthid_pipe_a";
    PipelineOptions o{out, {Stage::TrainGan, Stage::GenDataset, Stage::TrainRecognizer}, {}};
    const auto r = run_pipeline(cfg_, o);
    EXPECT_EQ(r.ran.size(), 3u);
    EXPECT_EQ(*r.verification_accuracy, *first_.verification_accuracy);
}

TEST(Pipeline, FailureNamesStage) {
    const auto cfg = parse_config(kTiny);
    PipelineOptions o{fresh("fail"), {Stage::TrainGan}, {}};
    try {
        run_pipeline(cfg, o);
        FAIL() << "expected StageFailure";
    } catch (const StageFailure& e) {
        EXPECT_EQ(e.stage(), Stage::GenDataset);
        EXPECT_NE(std::string(e.what()).find("gen-dataset"), std::string::npos);
    }
    EXPECT_THROW(run_pipeline(fs::path("/nonexistent/cfg.ini"), o), IoError);
}
