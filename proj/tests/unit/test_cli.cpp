#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "helpers.hpp"

using trigact::testing::scratch_dir;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TRIGACT_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json small_config() {
  std::ifstream in(std::string(TRIGACT_SOURCE_DIR) + "/configs/minimal.json");
  auto doc = nlohmann::json::parse(in);
  doc["dataset"]["synthetic"] = {{"train_size", 100}, {"test_size", 30}};
  doc["schedule"]["epochs"] = 1;
  doc.erase("theory");
  doc.erase("advanced");
  return doc;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const nlohmann::json& doc) {
  const auto p = dir / "config.json";
  std::ofstream(p) << doc.dump(2);
  return p;
}

}  // namespace

TEST(Cli, ExitCodesFollowTheContract) {
  const auto dir = scratch_dir("cli");
  const auto cfg = write_config(dir, small_config());
  const auto out = (dir / "run").string();
  EXPECT_EQ(run_cli("all --config " + cfg.string() + " --out " + out), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "report" / "report.md"));
  EXPECT_EQ(run_cli("all --config " + cfg.string() + " --out " + out), 0);

  auto changed = small_config();
  changed["attacks"][0]["iterations"] = 11;
  std::filesystem::create_directories(dir / "changed");
  const auto cfg2 = write_config(dir / "changed", changed);
  EXPECT_EQ(run_cli("eval --config " + cfg2.string() + " --out " + out), 4);

  auto bad = small_config();
  bad["models"][0]["arch"] = "resnet152";
  std::filesystem::create_directories(dir / "bad");
  const auto cfg3 = write_config(dir / "bad", bad);
  EXPECT_EQ(run_cli("all --config " + cfg3.string() + " --out " + (dir / "never").string()), 2);
  EXPECT_FALSE(std::filesystem::exists(dir / "never"));

  EXPECT_EQ(run_cli("all --out " + out), 2);  // missing --config
  EXPECT_EQ(run_cli("frobnicate --config " + cfg.string()), 2);
}

TEST(Cli, DivergenceIsNumericFailure) {
  const auto dir = scratch_dir("cli_numeric");
  auto doc = small_config();
  doc["schedule"]["lr"] = 1e30;
  const auto cfg = write_config(dir, doc);
  EXPECT_EQ(run_cli("train --config " + cfg.string() + " --out " + (dir / "run").string()), 3);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "checkpoints" / "sur_tiny.aborted.tac"));
}
