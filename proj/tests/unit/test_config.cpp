#include <gtest/gtest.h>

#include "immunity/config.hpp"
#include "immunity/error.hpp"

using namespace immunity;

TEST(ParseNumber, FractionsAndPlainValues) {
  EXPECT_EQ(parse_number("8/255"), 8.0 / 255.0);
  EXPECT_EQ(parse_number(" 0.5 "), 0.5);
  EXPECT_EQ(parse_number("1e-3"), 1e-3);
  EXPECT_THROW(parse_number("8/0"), ConfigError);
  EXPECT_THROW(parse_number("abc"), ConfigError);
  EXPECT_THROW(parse_number(""), ConfigError);
}

TEST(ParseRsg, Modes) {
  EXPECT_EQ(parse_rsg_mode("identity").kind(), RsgMode::Kind::identity);
  EXPECT_EQ(parse_rsg_mode("fresh").kind(), RsgMode::Kind::fresh_permutation);
  auto f = parse_rsg_mode("fixed:2,0,1");
  EXPECT_EQ(f.permutation(), (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_EQ(to_string(f), "fixed:2,0,1");
  EXPECT_THROW(parse_rsg_mode("fixed:0,0"), ConfigError);
  EXPECT_THROW(parse_rsg_mode("random"), ConfigError);
}

TEST(RunConfig, ParsesCommentsAndOverrides) {
  auto cfg = RunConfig::parse("# run\nalpha = 1\nbeta=0.5  # inline\n\ngamma = 0\nepsilon = 8/255\n");
  cfg.set("epochs", "3");
  auto r = resolve(cfg, true);
  EXPECT_EQ(r.train.coefficients.beta, 0.5);
  EXPECT_EQ(r.train.epochs, 3u);
  ASSERT_TRUE(r.attack);
  EXPECT_EQ(r.attack->epsilon, 8.0 / 255.0);
  EXPECT_THROW(cfg.set("epoch", "3"), ConfigError);
}

TEST(RunConfig, EnumeratesEveryProblem) {
  try {
    RunConfig::parse("alpah = 1\nbeta\ngamma =\nlearning_rate = 0.1\nlearning_rate = 0.2\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("run.cfg:1: unknown key 'alpah'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("run.cfg:2:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("run.cfg:3: missing value"), std::string::npos) << msg;
    EXPECT_NE(msg.find("run.cfg:5: duplicate key"), std::string::npos) << msg;
  }
}

TEST(Resolve, CoefficientsAreMandatory) {
  auto cfg = RunConfig::parse("beta = 1\n");
  try {
    resolve(cfg, true);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("alpha: required"), std::string::npos);
    EXPECT_NE(msg.find("gamma: required"), std::string::npos);
    EXPECT_EQ(msg.find("beta: required"), std::string::npos);
  }
  EXPECT_NO_THROW(resolve(cfg, false));
}

TEST(Resolve, CollectsValueErrors) {
  auto cfg = RunConfig::parse("alpha=1\nbeta=1\ngamma=1\nlearning_rate=-1\nbatch_size=1\nattack=cw\nn_experts=1\n");
  try {
    resolve(cfg, true);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("learning_rate must be positive"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch_size must be at least 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("attack: unknown attack 'cw'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("n_experts"), std::string::npos) << msg;
  }
}

TEST(Resolve, AttackNoneAndEcho) {
  auto cfg = RunConfig::parse("alpha=1\nbeta=0\ngamma=0\nattack=none\nrsg_eval=fixed:1,0,2\nn_experts=3\n");
  auto r = resolve(cfg, true);
  EXPECT_FALSE(r.attack);
  const std::string echo = r.echo_json();
  EXPECT_NE(echo.find("\"attack\":\"none\""), std::string::npos) << echo;
  EXPECT_NE(echo.find("\"rsg_eval\":\"fixed:1,0,2\""), std::string::npos) << echo;
  EXPECT_NE(echo.find("\"detached_cam_weights\":true"), std::string::npos) << echo;
}

TEST(Resolve, EpsilonEchoKeepsFullPrecision) {
  auto cfg = RunConfig::parse("alpha=1\nbeta=1\ngamma=0.1\nepsilon=8/255\n");
  EXPECT_NE(resolve(cfg, true).echo_json().find("0.03137254901960784"), std::string::npos);
}
