#include <gtest/gtest.h>

#include "synthid/config.hpp"

using namespace synthid;

TEST(Config, DefaultsResolveAndRoundTrip) {
    const ExperimentConfig c;
    EXPECT_NO_THROW(c.validate());
    const auto text = resolved_config(c);
    EXPECT_NE(text.find("lambda_aux = 0.1"), std::string::npos);
    EXPECT_NE(text.find("tau_pull = 0.7"), std::string::npos);
    EXPECT_NE(text.find("tau_push = 1.4"), std::string::npos);
    EXPECT_NE(text.find("tau_vary = 3"), std::string::npos);
    EXPECT_NE(text.find("tau_match = 5"), std::string::npos);
    EXPECT_NE(text.find("patience = 10"), std::string::npos);
    EXPECT_EQ(resolved_config(parse_config(text)), text);
}

TEST(Config, FileValuesApply) {
    const auto c = parse_config("[train]\nsteps = 12\nlr_g = 0.001\n[gan]\nsynth_channels = 8,8,4\n"
                                "[losses]\nobjective = minimax\nr1 = false\n[attack]\nvariant = no-margin\n");
    EXPECT_EQ(c.train.steps, 12);
    EXPECT_DOUBLE_EQ(c.train.lr_g, 0.001);
    EXPECT_EQ(c.gan.synth_channels, (std::vector<int>{8, 8, 4}));
    EXPECT_EQ(c.train.losses.objective, GanObjective::Minimax);
    EXPECT_FALSE(c.train.losses.r1);
    EXPECT_EQ(c.attack.variant, AttackVariant::NoMargin);
}

TEST(Config, UnknownKeysRejected) {
    EXPECT_THROW(parse_config("[train]\nstepz = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("[trian]\nsteps = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("steps = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nsteps = three\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nsteps = 3x\n"), ConfigError);
    EXPECT_THROW(parse_config("[losses]\nr1 = maybe\n"), ConfigError);
}

TEST(Config, EnvironmentOverridesFile) {
    auto c = parse_config("[train]\nsteps = 12\n");
    apply_env_overrides(c, {{"SYNTHID_TRAIN_STEPS", "40"}, {"SYNTHID_RECOGNIZER_S", "32"}, {"HOME", "/x"}});
    EXPECT_EQ(c.train.steps, 40);
    EXPECT_DOUBLE_EQ(c.recognizer.head.s, 32.0);
    EXPECT_THROW(apply_env_overrides(c, {{"SYNTHID_TRAIN_STEPZ", "1"}}), ConfigError);
}

TEST(Config, ValidationCatchesBadValues) {
    auto c = parse_config("[train]\nsteps = 0\n");
    EXPECT_THROW(c.validate(), ConfigError);
    c = parse_config("[world]\nresolution = 16\n");
    EXPECT_THROW(c.validate(), ConfigError);  // gan.resolution still 32
    c = parse_config("[world]\nreal_pool = 600\n");
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/experiment.ini", {}), IoError);
}
