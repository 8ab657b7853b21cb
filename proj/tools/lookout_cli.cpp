// lookout: simulate datasets, train, evaluate and plot.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "lookout/pipeline.hpp"

namespace {

using namespace lookout;
namespace pl = lookout::pipeline;

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::kConfigInvalid:
    case ErrorCode::kIo:
    case ErrorCode::kParse:
    case ErrorCode::kMissingDynamicData:
      return 2;
    case ErrorCode::kNonFiniteLoss:
    case ErrorCode::kNonFiniteGradient:
      return 3;
    case ErrorCode::kInconsistentClipSets:
      return 4;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Egocentric future-pose forecasting: data simulation, training and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (default: LOOKOUT_THREADS or 1)");

  pl::SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "render a synthetic dataset");
  s->add_option("--out", sim.out, "output directory")->required();
  s->add_option("--seed", sim.seed, "master seed");
  s->add_option("--scenes", sim.scenes, "number of sequences");
  s->add_option("--test-scenes", sim.test_scenes, "sequences held out for evaluation (default: one in five)");
  s->add_option("--agents", sim.agents, "dynamic agents per scene");
  s->add_option("--obstacles", sim.obstacles, "static obstacles per scene");
  s->add_option("--channels", sim.channels, "feature channels per pixel");
  s->add_option("--stride", sim.window.stride, "clip stride in frames");
  s->add_option("--dilation", sim.window.dilation, "frames between clip steps");

  pl::TrainOptions tr;
  std::int64_t steps = -1;
  std::int64_t seed = -1;
  bool goal = false;
  auto* t = app.add_subcommand("train", "train the forecasting model");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--config", tr.config, "JSON config with model/train sections");
  t->add_option("--steps", steps, "override optimizer steps");
  t->add_option("--seed", seed, "override training seed");
  t->add_option("--max-clips", tr.max_clips, "cap on training clips (0: all)");
  t->add_flag("--goal", goal, "condition on the ground-truth final position");
  t->add_flag("--resume", tr.resume, "continue from the checkpoint in --out");
  t->add_option("--stop-after", tr.stop_after, "stop at this step with a resumable checkpoint");

  pl::EvalOptions ev;
  auto* e = app.add_subcommand("eval", "evaluate the model and baselines");
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  e->add_option("--goal", ev.goal_checkpoint, "goal-conditioned model checkpoint");
  e->add_option("--baselines", ev.baselines, "const_vel, lin_ext, astar")->delimiter(',');
  e->add_option("--report", ev.report, "output prefix for <prefix>.csv and <prefix>.txt")->required();
  e->add_option("--predictions", ev.predictions, "directory for per-clip world-frame predictions");
  e->add_option("--dynamic", ev.dynamic_mode, "dynamic distances from 'tracks' or 'file'");
  e->add_option("--max-clips", ev.max_clips, "cap on evaluation clips (0: all)");
  e->add_option("--planner-speed", ev.planner.max_speed, "A* maximum speed, m/s");
  e->add_option("--planner-inflation", ev.planner.inflation, "A* obstacle clearance, m");

  pl::PlotOptions pt;
  std::int64_t start = -1;
  auto* p = app.add_subcommand("plot", "draw a BEV height map with past, future and prediction");
  p->add_option("--sequence", pt.sequence, "sequence directory or sequence.json")->required();
  p->add_option("--pred", pt.pred, "prediction file written by eval");
  p->add_option("--out", pt.out, "SVG output path")->required();
  p->add_option("--start", start, "clip start frame (default: from the prediction header, else 0)");
  p->add_option("--cell", pt.cell, "raster cell size, m");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  const std::size_t nthreads = pl::resolve_threads(threads ? std::optional<std::size_t>(threads) : std::nullopt);
  try {
    if (*s) {
      sim.threads = nthreads;
      const auto d = pl::run_simulate(sim);
      std::cout << "wrote " << d.sequences.size() << " sequences to " << sim.out.string() << '\n';
    } else if (*t) {
      tr.threads = nthreads;
      if (steps >= 0) tr.steps = steps;
      if (seed >= 0) tr.seed = static_cast<std::uint64_t>(seed);
      if (goal) tr.goal = true;
      const auto a = pl::run_train(tr);
      const auto& log = a.result.log;
      std::cout << "trained on " << a.clips << " clips for " << a.result.steps_run << " steps";
      if (!log.empty()) std::cout << ", final loss " << format_number(log.back().loss);
      std::cout << "\ncheckpoint: " << a.checkpoint.string() << '\n';
    } else if (*e) {
      ev.threads = nthreads;
      const auto out = pl::run_eval(ev);
      std::cout << evalkit::to_table(out.report);
      if (out.astar_fallbacks) std::cout << "A* start blocked on " << out.astar_fallbacks << " clips (used Lin_Ext)\n";
    } else if (*p) {
      if (start >= 0) pt.start = static_cast<std::size_t>(start);
      std::cout << "wrote " << pl::run_plot(pt).string() << '\n';
    }
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code(err.code());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
