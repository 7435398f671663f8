#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kModels = fs::path(CRITSMOOTH_SOURCE_DIR) / "models";

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("critsmooth_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(CRITSMOOTH_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto out = scratch("codes");
  const std::string o = " --out " + out.string();
  EXPECT_EQ(run("calibrate --model " + (kModels / "rank1_2d.toml").string() + o), 0);
  EXPECT_EQ(run("validate --model " + (kModels / "rank1_2d.toml").string() + o), 0);
  EXPECT_EQ(run("calibrate --model " + (kModels / "c14.toml").string() + o), 2);
  EXPECT_EQ(run("calibrate --model /no/such.toml" + o), 4);
  EXPECT_EQ(run("calibrate" + o), 4);
  EXPECT_EQ(run("frobnicate --model " + (kModels / "rank1_2d.toml").string() + o), 4);
  EXPECT_EQ(run("regen --mode sideways --model " + (kModels / "rank1_2d_b.toml").string() + o), 4);
  // atom regeneration is not available for a continuous ensemble
  EXPECT_EQ(run("regen --mode atom --alpha 0.5 --model " + (kModels / "ball_2d.toml").string() + o), 3);

  // accepted at parse time, fails while growing the environments
  EXPECT_EQ(run("fixedpoint --alpha 0.5 --depth 25 --cap 1000 --resolution 64 --model " + (kModels / "ball_2d.toml").string() + o), 3);

  const auto bad = out / "bad.toml";
  fs::create_directories(out);
  std::ofstream(bad) << slurp(kModels / "rank1_2d.toml") << "\ncolour = 3\n";
  EXPECT_EQ(run("calibrate --model " + bad.string() + o), 4);
}

TEST(Cli, OutputsAndManifest) {
  const auto out = scratch("outputs");
  ASSERT_EQ(run("spectral --s 0.5,1 --model " + (kModels / "rank1_2d.toml").string() + " --out " + out.string()), 0);
  const auto csv = slurp(out / "spectral.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "s,k,m,m_prime");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const auto manifest = slurp(out / "manifest.json");
  for (const char* key : {"\"seed\"", "\"version\"", "\"model_sha256\"", "\"wall_time_s\"", "spectral.csv", "\"sha256\""})
    EXPECT_NE(manifest.find(key), std::string::npos) << key;
}

TEST(Cli, ConfigFile) {
  const auto out = scratch("config");
  fs::create_directories(out);
  const auto cfg = out / "run.toml";
  std::ofstream(cfg) << "[many2one]\nmodel = \"" << (kModels / "rank1_2d_b.toml").string() << "\"\nn = 2\nout = \""
                     << (out / "o").string() << "\"\n";
  EXPECT_EQ(run("--config " + cfg.string() + " many2one"), 0);
  EXPECT_TRUE(fs::exists(out / "o" / "many2one.json"));
  std::ofstream(cfg, std::ios::app) << "bogus = 1\n";
  EXPECT_EQ(run("--config " + cfg.string() + " many2one"), 4);
}

TEST(Cli, WorkersDoNotChangeBytes) {
  const auto a = scratch("w1"), b = scratch("w3");
  const std::string args = "fixedpoint --replicates 300 --tuples 300 --model " + (kModels / "rank1_2d.toml").string();
  ASSERT_EQ(run(args + " --workers 1 --out " + a.string()), 0);
  ASSERT_EQ(run(args + " --workers 3 --out " + b.string()), 0);
  for (const char* f : {"laplace.csv", "fixedpoint.json"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}
