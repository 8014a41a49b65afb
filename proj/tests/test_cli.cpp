#include <gtest/gtest.h>

#include <plyhomog/commands.hpp>

#include <cstdlib>
#include <sys/wait.h>

using namespace plyhomog;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("plyhomog_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_config(const fs::path& out, const std::string& extra = "") {
  const std::string text = "geometry: {eps: 0.25, a: 0.2}\n"
                           "numerics: {n_cell: 16, n_effective: 3, n_macro: 8, h_div: 8, snapshots: 4}\n"
                           "study: {eps_list: [1/4, 1/8], T: 0.01, n_samples: 20000}\n"
                           "io: {output_dir: " +
                           out.string() + "}\n" + extra;
  return parse_config_text(text);
}

struct Proc {
  int code = -1;
  std::string out, err;
};

Proc run_cli(const std::string& args, const fs::path& work) {
  const fs::path o = work / "stdout.txt", e = work / "stderr.txt";
  const std::string cmd = std::string(PLYHOMOG_CLI) + " " + args + " > " + o.string() + " 2> " + e.string();
  const int status = std::system(cmd.c_str());
  Proc p;
  p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  p.out = read_text_file(o);
  p.err = read_text_file(e);
  return p;
}

}  // namespace

TEST(RunCommand, CellCacheIsReused) {
  const auto dir = scratch("cell");
  auto c = small_config(dir);
  auto first = run_command(c, "cell");
  EXPECT_FALSE(first.extra["anchors"]["cache_hit"].get<bool>());
  EXPECT_GT(first.extra["anchors"]["solved"].get<int>(), 0);
  EXPECT_TRUE(fs::exists(cell_cache_file(c)));
  auto second = run_command(c, "cell");
  EXPECT_TRUE(second.extra["anchors"]["cache_hit"].get<bool>());
  EXPECT_EQ(second.extra["anchors"]["solved"].get<int>(), 0);
  EXPECT_EQ(read_text_file(fs::path(first.dir) / "cell.csv"), read_text_file(fs::path(second.dir) / "cell.csv"));
  EXPECT_EQ(first.report.rows.size(), 27u);
  EXPECT_TRUE(first.report.passed());
  // the macro assembly draws on the same cache
  auto macro = run_command(c, "macro");
  EXPECT_TRUE(macro.extra["anchors"]["cache_hit"].get<bool>());
}

TEST(RunCommand, OutputsLandUnderCommandAndHash) {
  const auto dir = scratch("layout");
  auto c = small_config(dir);
  auto r = run_command(c, "geometry");
  EXPECT_EQ(fs::path(r.dir), dir / "geometry" / c.hash());
  for (const char* f : {"geometry.csv", "geometry.gp", "summary.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(r.dir) / f)) << f;
  const auto m = read_manifest(r.dir);
  for (const auto& f : m.files) EXPECT_EQ(f.sha256, sha256_hex(read_text_file(fs::path(r.dir) / f.file)));
  const auto summary = nlohmann::json::parse(read_text_file(fs::path(r.dir) / "summary.json"));
  EXPECT_EQ(summary["config_hash"], c.hash());
  EXPECT_EQ(summary["command"], "geometry");
}

TEST(RunCommand, ConvergeWritesOneRowPerEps) {
  const auto dir = scratch("converge");
  auto c = small_config(dir, "kinetics: {c0: {kind: cosine, value: 1, amplitude: 0.5, modes: [1, 0, 1]}}\n");
  c.study.T = 0.004;
  auto r = run_command(c, "converge");
  const auto t = read_csv((fs::path(r.dir) / "convergence.csv").string());
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(t.number(0, "eps"), 0.25);
  EXPECT_DOUBLE_EQ(t.number(1, "eps"), 0.125);
  EXPECT_GT(t.number(0, "rel_l2_error"), 0.0);
}

TEST(RunCommand, UnfoldCheckConstantPsi) {
  const auto dir = scratch("unfold");
  auto c = parse_config_text("geometry: {eps: 0.125, a: 0.2, gamma: {kind: constant, value: 0}}\n"
                             "study: {eps_list: [1/8, 1/16, 1/32]}\n"
                             "io: {output_dir: " + dir.string() + "}\n");
  auto r = run_command(c, "unfold-check");
  ASSERT_EQ(r.report.rows.size(), 3u);
  EXPECT_LE(r.report.at(2, "rel_gap"), 0.02);
  EXPECT_NEAR(r.report.at(0, "limit"), 2 * pi * 0.2, 1e-9);
  EXPECT_TRUE(r.report.passed());
}

TEST(RunCommand, MicroMacroScaling) {
  const auto dir = scratch("runs");
  auto c = small_config(dir, "kinetics: {c0: {kind: cosine, value: 1, amplitude: 0.5, modes: [1, 1, 0]}}\n");
  auto micro = run_command(c, "micro");
  EXPECT_GT(micro.report.rows.size(), 2u);
  EXPECT_TRUE(micro.report.passed());
  auto macro = run_command(c, "macro");
  EXPECT_GT(macro.report.rows.size(), 2u);
  auto sc = small_config(dir, "kinetics: {A: 1}\n");
  sc.geometry.r_exp = 0.75;
  auto scaling = run_command(sc, "scaling");
  EXPECT_EQ(scaling.report.rows.size(), 2u);
  sc.geometry.r_exp = 0.5;
  try {
    run_command(sc, "scaling");
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.code(), errc::validation_error);
  }
}

TEST(RunCommand, RerunGivesIdenticalCsv) {
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  for (const char* cmd : {"geometry", "scaling", "micro"}) {
    auto ra = run_command(small_config(a), cmd);
    auto rb = run_command(small_config(b), cmd);
    const std::string name = ra.report.id + ".csv";
    EXPECT_EQ(read_text_file(fs::path(ra.dir) / name), read_text_file(fs::path(rb.dir) / name)) << cmd;
  }
}

TEST(Binary, SuccessAndOverrides) {
  const auto dir = scratch("bin_ok");
  write_text_file(dir / "c.yaml", "geometry: {eps: 0.25}\nstudy: {eps_list: [1/4], n_samples: 20000}\n");
  auto p = run_cli("geometry " + (dir / "c.yaml").string() + " --out " + (dir / "o").string() + " --seed 5", dir);
  EXPECT_EQ(p.code, 0) << p.err;
  auto c = parse_config((dir / "c.yaml").string());
  c.io.seed = 5;
  EXPECT_TRUE(fs::exists(dir / "o" / "geometry" / c.hash() / "geometry.csv"));
  EXPECT_NE(p.out.find("output: "), std::string::npos);
}

TEST(Binary, ExitCodesAndErrorJson) {
  const auto dir = scratch("bin_err");
  write_text_file(dir / "bad.yaml", "geometry: {a: 0.5}\n");
  auto p = run_cli("cell " + (dir / "bad.yaml").string(), dir);
  EXPECT_EQ(p.code, 2);
  const auto j = nlohmann::json::parse(p.err);
  EXPECT_EQ(j["error"], "ValidationError");
  EXPECT_EQ(j["exit_code"], 2);

  write_text_file(dir / "syntax.yaml", "geometry: {a: [\n");
  p = run_cli("cell " + (dir / "syntax.yaml").string(), dir);
  EXPECT_EQ(p.code, 2);
  EXPECT_EQ(nlohmann::json::parse(p.err)["error"], "ParseError");

  p = run_cli("cell " + (dir / "missing.yaml").string(), dir);
  EXPECT_EQ(p.code, 4);
  EXPECT_EQ(nlohmann::json::parse(p.err)["error"], "IoError");

  p = run_cli("frobnicate x.yaml", dir);
  EXPECT_EQ(p.code, 2);

  // a solver that is not allowed enough iterations
  write_text_file(dir / "tight.yaml", "geometry: {eps: 0.25}\nnumerics: {cg_max_iter: 1}\nstudy: {T: 0.001}\n"
                                      "kinetics: {c0: {kind: cosine, value: 1, amplitude: 0.5, modes: [1, 1, 1]}}\n"
                                      "io: {output_dir: " + (dir / "o").string() + "}\n");
  p = run_cli("micro " + (dir / "tight.yaml").string(), dir);
  EXPECT_EQ(p.code, 3) << p.err;
}
