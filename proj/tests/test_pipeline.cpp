#include "econgrasp/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>

using namespace econgrasp;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("econgrasp_test_" + name);
  fs::remove_all(p);
  return p;
}

PipelineConfig tiny(const fs::path& root) {
  PipelineConfig c;
  c.work_dir = root.string();
  c.n_views = 12;
  c.library = "box:0.03:0.04:0.05;plate:0.04:0.02";
  c.density = 10000.0;
  c.n_scenes = 2;
  c.min_objects = 2;
  c.max_objects = 2;
  c.match_samples = 128;
  c.head_gradcheck_seeds = 1;
  c.head_micro_scenes = 2;
  c.head_micro_views = 12;
  c.head_heldout = 1;
  c.head_steps = 3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(ECONGRASP_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, ParseCommentsAndValues) {
  std::istringstream in("# header\nn_views = 12  # trailing\n\nseed=42\ndepth_grid = 0.01, 0.02,0.03,0.04\n");
  const PipelineConfig c = PipelineConfig::parse(in);
  EXPECT_EQ(c.n_views, 12);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.depth_grid, (std::vector<double>{0.01, 0.02, 0.03, 0.04}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  PipelineConfig c;
  EXPECT_THROW(c.set("n_view", "3"), ValidationError);
  EXPECT_THROW(c.set("n_views", "3x"), ValidationError);
  EXPECT_THROW(c.set("n_views", ""), ValidationError);
  EXPECT_THROW(c.set("threshold_mu", "abc"), ValidationError);
  EXPECT_THROW(c.set("seed", "-1x"), ValidationError);
  EXPECT_THROW(c.set("depth_grid", "0.1,,0.2"), ValidationError);
  std::istringstream no_eq("n_views 3\n");
  EXPECT_THROW(PipelineConfig::parse(no_eq), ValidationError);
  EXPECT_THROW(PipelineConfig::load("/nonexistent/econgrasp.cfg"), IoError);
}

TEST(Config, ValidateCatchesBadValues) {
  auto bad = [](auto mutate) {
    PipelineConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ValidationError);
  };
  bad([](PipelineConfig& c) { c.n_views = 0; });
  bad([](PipelineConfig& c) { c.n_depths = 3; });
  bad([](PipelineConfig& c) { c.jobs = 0; });
  bad([](PipelineConfig& c) { c.sampling = "random"; });
  bad([](PipelineConfig& c) { c.topk_rule = "top10"; });
  bad([](PipelineConfig& c) { c.library = "cone:0.1"; });
  bad([](PipelineConfig& c) { c.library = "box:0.1"; });
  bad([](PipelineConfig& c) { c.min_objects = 4, c.max_objects = 3; });
  PipelineConfig c;
  c.predictions = (fs::path(c.work_dir) / "predictions" / "label_oracle.txt").string();
  EXPECT_NO_THROW(c.validate());  // eval alone may read the pipeline's predictions
  EXPECT_THROW(c.validate_for_run(), ValidationError);
}

TEST(Config, TextRoundTripAndEcho) {
  PipelineConfig c = tiny("/tmp/somewhere");
  c.jobs = 3;
  std::istringstream in(c.to_text());
  const PipelineConfig back = PipelineConfig::parse(in);
  EXPECT_EQ(back.entries(), c.entries());
  const std::string echo = c.echo();
  EXPECT_EQ(echo.find("work_dir"), std::string::npos);
  EXPECT_EQ(echo.find("jobs"), std::string::npos);
  EXPECT_NE(echo.find("# n_views = 12\n"), std::string::npos);
  PipelineConfig other = c;
  other.jobs = 1;
  other.work_dir = "/elsewhere";
  EXPECT_EQ(other.echo(), echo);
}

TEST(Paths, DistinctDirectories) {
  Paths p = Paths::under("/tmp/x");
  EXPECT_NO_THROW(p.validate());
  p.labels = p.data;
  EXPECT_THROW(p.validate(), ValidationError);
  p = Paths::under("/tmp/x");
  p.reports = "";
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(Pipeline, InvalidConfigFailsBeforeAnyStage) {
  const fs::path root = scratch("invalid");
  PipelineConfig c = tiny(root);
  c.n_views = 0;
  std::ostringstream log;
  try {
    run_pipeline(c, log);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "config");
  }
  EXPECT_FALSE(fs::exists(root));
}

TEST(Pipeline, StageFailureLeavesIncompleteMarker) {
  const fs::path root = scratch("failing");
  PipelineConfig c = tiny(root);
  // three-object scenes cannot be placed in a 2 cm square
  c.min_objects = 3;
  c.max_objects = 3;
  c.scene_half_extent = 0.01;
  std::ostringstream log;
  try {
    run_pipeline(c, log);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "synth");
    EXPECT_EQ(std::string(e.what()).rfind("stage synth: ", 0), 0u);
  }
  EXPECT_EQ(slurp(root / kIncompleteMarker), "stage synth\n");
  fs::remove_all(root);
}

TEST(Pipeline, CompileReportsEveryFailingScene) {
  const fs::path root = scratch("compile_errors");
  const PipelineConfig c = tiny(root);
  const Paths paths = paths_of(c);
  std::ostringstream log;
  stage_synth(c, paths, log);
  // damage the plate labels: only scenes containing a plate may fail
  const Dataset d = load_dataset(paths);
  fs::resize_file(paths.objects() / object_file(1), 10);
  std::size_t expected = 0;
  for (const auto& s : d.scenes) {
    bool uses = false;
    for (const auto& inst : s.objects) uses = uses || inst.library_id == 1;
    expected += uses ? 1 : 0;
  }
  EXPECT_THROW(stage_compile(c, paths, log), Error);
  const std::string errors = slurp(paths.reports / "compile_errors.txt");
  EXPECT_EQ(static_cast<std::size_t>(std::count(errors.begin(), errors.end(), '\n')), expected);
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    bool uses = false;
    for (const auto& inst : d.scenes[i].objects) uses = uses || inst.library_id == 1;
    EXPECT_EQ(fs::exists(paths.labels / (scene_stem(i) + ".egl")), !uses);
  }
  fs::remove_all(root);
}

TEST(Pipeline, DeterministicAcrossRunsAndWorkers) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  PipelineConfig ca = tiny(a), cb = tiny(b);
  cb.jobs = 2;
  std::ostringstream log;
  const PipelineSummary sa = run_pipeline(ca, log);
  run_pipeline(cb, log);
  EXPECT_FALSE(fs::exists(a / kIncompleteMarker));
  const auto ta = tree(a), tb = tree(b);
  EXPECT_EQ(ta, tb);
  for (const char* f : {"reports/summary.txt", "reports/compile_stats.txt", "reports/eval.txt",
                        "predictions/label_oracle.txt", "labels/scene_0001.egl"}) {
    EXPECT_TRUE(ta.count(f)) << f;
  }
  EXPECT_EQ(ta.at("reports/summary.txt").rfind(ca.echo(), 0), 0u);
  EXPECT_EQ(sa.compile.n_scenes, 2u);
  EXPECT_GT(sa.compile.points_kept, 0u);
  EXPECT_LE(sa.compile.points_kept, sa.compile.points_total);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, ExitCodes) {
  const fs::path root = scratch("cli");
  fs::create_directories(root);
  const fs::path cfg = root / "tiny.cfg";
  {
    std::ofstream out(cfg);
    out << tiny(root / "run").to_text();
  }
  const fs::path bad = root / "bad.cfg";
  {
    std::ofstream out(bad);
    out << "n_views = 0\n";
  }
  const fs::path unknown = root / "unknown.cfg";
  {
    std::ofstream out(unknown);
    out << "colour = blue\n";
  }
  const std::string c = "--config " + cfg.string();
  EXPECT_NE(cli("--config " + bad.string() + " synth"), 0);
  EXPECT_NE(cli("--config " + unknown.string() + " synth"), 0);
  EXPECT_NE(cli("--config " + (root / "missing.cfg").string() + " synth"), 0);
  EXPECT_NE(cli(c + " compile"), 0);  // nothing synthesized yet
  EXPECT_NE(cli(c + " frobnicate"), 0);
  EXPECT_NE(cli(c + " --jobs 0 synth"), 0);
  EXPECT_EQ(cli(c + " synth"), 0);
  EXPECT_EQ(cli(c + " --jobs 2 compile"), 0);
  EXPECT_EQ(cli(c + " analyze"), 0);
  EXPECT_EQ(cli(c + " match"), 0);
  EXPECT_NE(cli(c + " eval --predictions " + (root / "missing.txt").string()), 0);
  EXPECT_EQ(cli(c + " run"), 0);
  EXPECT_EQ(cli(c + " eval --predictions " + (root / "run" / "predictions" / "label_oracle.txt").string() +
                " --topk-rule fixed50"),
            0);
  EXPECT_NE(cli(c + " eval --predictions x --topk-rule top7"), 0);
  fs::remove_all(root);
}
