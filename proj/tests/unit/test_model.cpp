#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "critsmooth/model.hpp"
#include "critsmooth/model_io.hpp"

using namespace critsmooth;

namespace {

std::filesystem::path model_path(const char* name) { return std::filesystem::path(CRITSMOOTH_SOURCE_DIR) / "models" / name; }

void expect_same(const EnsembleSpec& a, const EnsembleSpec& b) {
  EXPECT_EQ(a.name, b.name);
  EXPECT_EQ(a.kind, b.kind);
  EXPECT_EQ(a.d, b.d);
  EXPECT_DOUBLE_EQ(a.theta, b.theta);
  EXPECT_EQ(a.ball_count, b.ball_count);
  ASSERT_EQ(a.templates.size(), b.templates.size());
  for (std::size_t t = 0; t < a.templates.size(); ++t) {
    EXPECT_NEAR(a.templates[t].prob, b.templates[t].prob, 1e-15);
    ASSERT_EQ(a.templates[t].matrices.size(), b.templates[t].matrices.size());
    for (std::size_t i = 0; i < a.templates[t].matrices.size(); ++i)
      EXPECT_LT((a.templates[t].matrices[i] - b.templates[t].matrices[i]).norm(), 1e-13);
  }
  if (!a.finite()) {
    EXPECT_LT((a.ball_center - b.ball_center).norm(), 1e-15);
    EXPECT_DOUBLE_EQ(a.ball_radius, b.ball_radius);
  }
}

}  // namespace

TEST(Fixtures, ShippedFilesMatchBuilders) {
  expect_same(load_model(model_path("rank1_2d.toml")), rank1_2d());
  expect_same(load_model(model_path("rank1_2d_b.toml")), rank1_2d_b());
  expect_same(load_model(model_path("c14.toml")), c14());
  expect_same(load_model(model_path("ball_2d.toml")), ball_2d());
}

TEST(Fixtures, IidExpansion) {
  const auto s = rank1_2d();
  EXPECT_EQ(s.templates.size(), 4u);  // 2 factors, 2 components
  double total = 0.0;
  for (const auto& t : s.templates) total += t.prob;
  EXPECT_NEAR(total, 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(s.expected_n(), 2.0);
  // product template (100, 100) has probability 1e-4
  double pmax = 0.0;
  for (const auto& t : s.templates)
    if (t.matrices[0].norm() > 50 && t.matrices[1].norm() > 50) pmax = t.prob;
  EXPECT_NEAR(pmax, 1e-4, 1e-18);
}

TEST(Fixtures, MuAtomsAreAMeanOverBranches) {
  const auto s = rank1_2d_b(0.5);
  double total = 0.0;
  for (const auto& a : mu_atoms(s)) total += a.weight;
  EXPECT_NEAR(total, 1.0, 1e-14);
}

TEST(Assumptions, FixturesPass) {
  for (const auto& s : {rank1_2d(), rank1_2d_b(), ball_2d()}) {
    const auto rep = check_assumptions(s);
    EXPECT_TRUE(rep.ok()) << s.name << ": " << rep.failures();
    EXPECT_GT(rep.c, 0.0);
  }
}

TEST(Assumptions, RejectsNonAllowable) {
  Mat bad(2, 2);
  bad << 1.0, 0.0, 0.0, 0.0;  // column of zeros
  const auto s = make_iid_spec("bad", EnsembleKind::FiniteTuple, 2, 1.0, 2, {{1.0, bad, std::nullopt}});
  EXPECT_FALSE(check_assumptions(s).ok());
}

TEST(Ball, SamplesStayInBall) {
  const auto s = ball_2d();
  Stream rng(3);
  for (int i = 0; i < 2000; ++i) {
    const Mat m = sample_ball_matrix(s.center(), s.radius(), rng);
    EXPECT_LE((m - s.center()).norm(), s.radius() * (1 + 1e-12));
  }
}

TEST(ModelIO, RoundTrip) {
  for (const auto& s : {rank1_2d(0.3), rank1_2d_b(), c14(), ball_2d(0.7)}) expect_same(parse_model(format_model(s)), s);
  Mat a(2, 2), b(2, 2);
  a << 1, 2, 0.5, 1;
  b << 0.1, 0.2, 0.3, 0.4;
  const auto t = finite_tuple_spec("T", 2, 0.9, {{0.25, {a}, {}}, {0.75, {a, b, b}, {}}});
  expect_same(parse_model(format_model(t)), t);
}

TEST(ModelIO, UnknownKeysRejected) {
  const std::string base = "name='x'\nkind='rank_one_finite'\nd=2\n[components]\ncount=2\n[[components.factor]]\nprob=1.0\nv=[1.0,1.0]\nw=[1.0,1.0]\n";
  EXPECT_NO_THROW(parse_model(base));
  EXPECT_THROW(parse_model(base + "colour=1\n"), Error);
  EXPECT_THROW(parse_model("extra=1\n" + base), Error);
}

TEST(ModelIO, ErrorsAreConfigErrors) {
  const std::vector<std::string> bad = {
      "kind='rank_one_finite'\nd=2\n",                                       // no block
      "kind='nonsense'\nd=2\n[ball]\ncount=2\ncenter=[[1,0],[0,1]]\nradius=0.1\n",  // bad kind
      "kind='uniform_ball'\nd=2\n[ball]\ncount=2\ncenter=[[1,0]]\nradius=0.1\n",    // wrong shape
      "kind='uniform_ball'\nd=9\n[ball]\ncount=2\ncenter=[[1,0],[0,1]]\nradius=0.1\n",
      "kind='uniform_ball'\nd=2\ntheta=-1\n[ball]\ncount=2\ncenter=[[1,0],[0,1]]\nradius=0.1\n",
      "this is not toml",
  };
  for (const auto& text : bad) {
    try {
      parse_model(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::ConfigError) << text;
    }
  }
}

TEST(ModelIO, MissingFileNamesPath) {
  try {
    load_model("/no/such/model.toml");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/no/such/model.toml"), std::string::npos);
  }
}
