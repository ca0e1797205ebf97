// econgrasp command-line entry point.

#include "econgrasp/econgrasp.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

namespace eg = econgrasp;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string work_dir;
};

eg::PipelineConfig load_config(const Globals& g) {
  eg::PipelineConfig c = g.config.empty() ? eg::PipelineConfig{} : eg::PipelineConfig::load(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.jobs) c.jobs = *g.jobs;
  if (!g.work_dir.empty()) c.work_dir = g.work_dir;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Economic grasp supervision toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed (overrides config)");
  app.add_option("--jobs", g.jobs, "worker threads (overrides config)");
  app.add_option("--work-dir", g.work_dir, "output root (overrides config)");

  std::optional<double> threshold_mu;
  std::optional<int> views;
  std::string input, output, labels, out, scenes, predictions, topk_rule;
  std::optional<int> steps;
  std::optional<double> rate;

  auto* synth = app.add_subcommand("synth", "generate the object library, dense labels and scenes");
  synth->add_option("--output", output, "data directory (default <work_dir>/data)");
  synth->add_option("--views", views, "number of views");

  auto* compile = app.add_subcommand("compile", "compile dense labels into economic scene labels");
  compile->add_option("--input", input, "data directory written by synth (default <work_dir>/data)");
  compile->add_option("--output", output, "economic label directory (default <work_dir>/labels)");
  compile->add_option("--threshold-mu", threshold_mu, "graspability friction threshold");
  compile->add_option("--views", views, "number of views");

  auto* analyze = app.add_subcommand("analyze", "label ambiguity statistics over dense labels");
  analyze->add_option("--input", input, "data directory written by synth (default <work_dir>/data)");
  analyze->add_option("--threshold-mu", threshold_mu, "graspability friction threshold");
  analyze->add_option("--out", out, "report path (default <work_dir>/reports/ambiguity.txt)");

  auto* match = app.add_subcommand("match", "sample scene points and match them to economic labels");
  match->add_option("--input", input, "data directory written by synth (default <work_dir>/data)");
  match->add_option("--labels", labels, "economic label directory (default <work_dir>/labels)");

  auto* head_check = app.add_subcommand("head-check", "gradient checks and micro-training of the grasp head");
  head_check->add_option("--steps", steps, "gradient-descent steps");
  head_check->add_option("--rate", rate, "learning rate");

  auto* eval = app.add_subcommand("eval", "friction-sweep AP of predicted grasps");
  eval->add_option("--scenes", scenes, "data directory written by synth (default <work_dir>/data)");
  eval->add_option("--predictions", predictions, "predictions file: 'scene_id x y z v a d w s' per line")
      ->required();
  eval->add_option("--topk-rule", topk_rule, "available | fixed50");

  auto* run = app.add_subcommand("run", "full pipeline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    eg::PipelineConfig c = load_config(g);
    if (threshold_mu) c.threshold_mu = *threshold_mu;
    if (views) c.n_views = *views;
    if (steps) c.head_steps = *steps;
    if (rate) c.head_rate = *rate;
    if (!topk_rule.empty()) c.topk_rule = topk_rule;
    if (*eval) c.predictions = predictions;
    c.validate();

    eg::Paths paths = eg::paths_of(c);
    if (*synth && !output.empty()) paths.data = output;
    if (*compile && !output.empty()) paths.labels = output;
    if (!input.empty()) paths.data = input;
    if (!labels.empty()) paths.labels = labels;
    if (!scenes.empty()) paths.data = scenes;
    paths.validate();

    if (*synth) {
      eg::run_stage("synth", [&] { eg::stage_synth(c, paths, std::cout); });
    } else if (*compile) {
      const auto st = eg::run_stage("compile", [&] { return eg::stage_compile(c, paths, std::cerr); });
      std::cout << eg::format_report(st);
    } else if (*analyze) {
      const eg::fs::path report = out.empty() ? paths.reports / "ambiguity.txt" : eg::fs::path(out);
      const auto a = eg::run_stage("analyze", [&] { return eg::stage_analyze(c, paths, report, std::cerr); });
      std::cout << eg::format_report(a);
    } else if (*match) {
      eg::run_stage("match", [&] { return eg::stage_match(c, paths, std::cout); });
    } else if (*head_check) {
      eg::run_stage("head-check", [&] { return eg::stage_head_check(c, paths, std::cout); });
    } else if (*eval) {
      eg::run_stage("eval", [&] { return eg::stage_eval(c, paths, predictions, std::cout); });
    } else if (*run) {
      eg::run_pipeline(c, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
