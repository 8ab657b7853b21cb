#pragma once

// Seeded, resumable training loop: AdamW + one-cycle schedule, fixed-order
// batch gradient reduction, CSV loss log and periodic checkpoints.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lookout/error.hpp"
#include "lookout/model.hpp"
#include "lookout/ndiff.hpp"

namespace lookout::model {

struct TrainConfig {
  std::int64_t steps = 3000;
  std::size_t batch = 4;
  double max_lr = 2e-3;
  double weight_decay = 0.05;
  double pct_start = 0.05;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 500;
  std::size_t threads = 1;

  ndiff::OneCycleSchedule schedule() const {
    return {max_lr, steps, pct_start, div_factor, final_div_factor};
  }
};

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"steps", t.steps},       {"batch", t.batch},
          {"max_lr", t.max_lr},     {"weight_decay", t.weight_decay},
          {"pct_start", t.pct_start}, {"div_factor", t.div_factor},
          {"final_div_factor", t.final_div_factor}, {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t = {}) {
  try {
    t.steps = j.value("steps", t.steps);
    t.batch = j.value("batch", t.batch);
    t.max_lr = j.value("max_lr", t.max_lr);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.pct_start = j.value("pct_start", t.pct_start);
    t.div_factor = j.value("div_factor", t.div_factor);
    t.final_div_factor = j.value("final_div_factor", t.final_div_factor);
    t.seed = j.value("seed", t.seed);
    t.checkpoint_every = j.value("checkpoint_every", t.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfigInvalid, std::string("bad training config: ") + e.what());
  }
  require(t.batch >= 1, ErrorCode::kConfigInvalid, "batch must be >= 1");
  t.schedule().validate();
  return t;
}

struct LogRow {
  std::int64_t step = 0;
  double lr = 0, loss = 0, loss_trans = 0, loss_rot = 0;
};

inline std::string log_header() { return "step,lr,loss,loss_trans,loss_rot"; }

inline std::string format_log(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os << log_header() << '\n';
  for (const auto& r : rows)
    os << r.step << ',' << format_number(r.lr) << ',' << format_number(r.loss) << ',' << format_number(r.loss_trans)
       << ',' << format_number(r.loss_rot) << '\n';
  return os.str();
}

inline std::vector<LogRow> parse_log(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<LogRow> rows;
  std::getline(is, line);
  if (line != log_header()) fail(ErrorCode::kParse, "training log has an unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    LogRow r;
    char c1, c2, c3, c4;
    std::istringstream ls(line);
    if (!(ls >> r.step >> c1 >> r.lr >> c2 >> r.loss >> c3 >> r.loss_trans >> c4 >> r.loss_rot))
      fail(ErrorCode::kParse, "bad training log line '" + line + "'");
    rows.push_back(r);
  }
  return rows;
}

/// Index of the sample used by `slot` of `step`: epoch-wise permutations
/// derived only from (seed, epoch), so resumed runs see the same order.
class SampleOrder {
 public:
  SampleOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
  std::size_t at(std::int64_t step, std::size_t batch, std::size_t slot) {
    const std::uint64_t k = static_cast<std::uint64_t>(step) * batch + slot;
    const std::uint64_t epoch = k / n_;
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ull + epoch + 1);
      std::shuffle(perm_.begin(), perm_.end(), rng);
      epoch_ = epoch;
    }
    return perm_[k % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

struct TrainPaths {
  std::filesystem::path checkpoint;  // empty: no checkpoints
  std::filesystem::path log;         // empty: no log file
  bool resume = false;
  std::int64_t stop_after = -1;  // stop early at this step (simulates an interrupted run)
};

struct TrainResult {
  LookOut<float> model;
  std::vector<LogRow> log;
  std::int64_t steps_run = 0;
};

inline std::string checkpoint_metadata(const ModelConfig& mc, const TrainConfig& tc, std::int64_t step) {
  return nlohmann::json{{"step", step}, {"model_config", to_json(mc)}, {"train_config", to_json(tc)}}.dump();
}

inline double predict_loss_and_grad(LookOut<float>& net, const ClipSample& s, float scale, ndiff::PoseLossValue* value) {
  ForwardCache<float> cache;
  const Tensor<float> pred = net.forward(s.input, &cache);
  if (!pred.all_finite()) fail(ErrorCode::kNonFiniteLoss, "prediction became non-finite");
  try {
    *value = ndiff::pose_loss(pred, s.target, net.config.loss);
  } catch (const Error& e) {
    // A prediction with no recoverable rotation leaves the loss undefined.
    if (e.code() == ErrorCode::kDegenerateRotation) fail(ErrorCode::kNonFiniteLoss, std::string("loss undefined: ") + e.what());
    throw;
  }
  if (!std::isfinite(value->total)) fail(ErrorCode::kNonFiniteLoss, "loss became non-finite");
  net.backward(cache, ndiff::pose_loss_backward(pred, s.target, net.config.loss, scale));
  return value->total;
}

inline TrainResult train(const std::vector<ClipSample>& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const TrainPaths& paths = {}) {
  require(!data.empty(), ErrorCode::kConfigInvalid, "training set is empty");
  validate(mcfg);
  const auto sched = tcfg.schedule();
  sched.validate();
  require(tcfg.batch >= 1, ErrorCode::kConfigInvalid, "batch must be >= 1");

  TrainResult res;
  res.model = LookOut<float>(mcfg, tcfg.seed);
  auto& net = res.model;
  ndiff::OptimState<float> opt(net.params, {0.9, 0.999, 1e-8, tcfg.weight_decay});
  std::int64_t start = 0;
  if (paths.resume) {
    require(!paths.checkpoint.empty() && std::filesystem::exists(paths.checkpoint), ErrorCode::kIo,
            "no checkpoint to resume from");
    auto ck = ndiff::read_checkpoint(paths.checkpoint.string());
    net.load(ck.params);
    require(ck.has_optimizer, ErrorCode::kParse, "checkpoint lacks optimizer state");
    opt.m = ck.optimizer.m;
    opt.v = ck.optimizer.v;
    opt.step = ck.optimizer.step;
    start = opt.step;
    if (!paths.log.empty() && std::filesystem::exists(paths.log)) {
      std::ifstream is(paths.log);
      std::stringstream ss;
      ss << is.rdbuf();
      for (const auto& r : parse_log(ss.str()))
        if (r.step < start) res.log.push_back(r);
    }
  }

  auto save = [&](std::int64_t step) {
    if (!paths.checkpoint.empty())
      ndiff::write_checkpoint(paths.checkpoint.string(), net.params, &opt, checkpoint_metadata(mcfg, tcfg, step));
    if (!paths.log.empty()) {
      std::ofstream os(paths.log, std::ios::trunc);
      os << format_log(res.log);
    }
  };

  SampleOrder order(data.size(), tcfg.seed);
  const std::size_t workers = std::max<std::size_t>(1, std::min(tcfg.threads, tcfg.batch));
  std::vector<LookOut<float>> replicas(tcfg.batch, net);
  std::vector<ndiff::PoseLossValue> values(tcfg.batch);
  const float scale = 1.0f / static_cast<float>(tcfg.batch);
  const std::int64_t end = paths.stop_after >= 0 ? std::min(tcfg.steps, paths.stop_after) : tcfg.steps;
  for (std::int64_t step = start; step < end; ++step) {
    std::vector<std::size_t> idx(tcfg.batch);
    for (std::size_t b = 0; b < tcfg.batch; ++b) idx[b] = order.at(step, tcfg.batch, b);
    for (auto& r : replicas) {
      for (std::size_t i = 0; i < r.params.size(); ++i) r.params[i].value = net.params[i].value;
      r.zero_grad();
    }
    std::vector<std::exception_ptr> errors(tcfg.batch);
    auto run = [&](std::size_t w) {
      for (std::size_t b = w; b < tcfg.batch; b += workers) {
        try {
          predict_loss_and_grad(replicas[b], data[idx[b]], scale, &values[b]);
        } catch (...) {
          errors[b] = std::current_exception();
        }
      }
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    LogRow row;
    row.step = step;
    row.lr = ndiff::onecycle_lr(sched, step);
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      auto& g = net.params[i].grad;
      g.fill(0.0f);
      for (std::size_t b = 0; b < tcfg.batch; ++b) g += replicas[b].params[i].grad;
    }
    for (std::size_t b = 0; b < tcfg.batch; ++b) {
      row.loss += values[b].total / static_cast<double>(tcfg.batch);
      row.loss_trans += values[b].trans / static_cast<double>(tcfg.batch);
      row.loss_rot += values[b].rot / static_cast<double>(tcfg.batch);
    }
    ndiff::adamw_step(net.params, opt, row.lr);
    res.log.push_back(row);
    ++res.steps_run;
    if (tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0) save(step + 1);
  }
  if (end == tcfg.steps) save(tcfg.steps);
  return res;
}

inline std::vector<Pose> predict(const LookOut<float>& net, const ClipSample& s) {
  return tensor_to_poses(net.forward(s.input));
}

}  // namespace lookout::model
