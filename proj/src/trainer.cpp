#include "spongelab/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "spongelab/error.hpp"
#include "spongelab/rng.hpp"
#include "spongelab/tensor_io.hpp"

namespace spongelab {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError("config key '" + key + "': cannot parse '" + text + "'");
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + " contains non-finite values");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be positive");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch < 1) throw ValidationError("batch must be at least 1");
  if (patch_h < 1 || patch_w < 1) throw ValidationError("patch size must be positive");
  if (instance_steps < 0) throw ValidationError("instance_steps must be non-negative");
  if (!(init >= 0.0 && init <= 1.0)) throw ValidationError("init must lie in [0, 1]");
  if (cycle < 1) throw ValidationError("cycle must be at least 1");
  if (mode == PerturbationMode::additive) FeasibleSet::additive(epsilon);
  weights().validate();
}

SpongeTarget TrainConfig::target() const {
  return SpongeTarget::cycle(target_length, cycle, horizon, head_weight);
}

LossWeights TrainConfig::weights() const { return {lambda_ban, lambda_stop}; }

FeasibleSet TrainConfig::feasible() const {
  return mode == PerturbationMode::replacement ? FeasibleSet::replacement()
                                                : FeasibleSet::additive(epsilon);
}

Placement TrainConfig::placement_for(int height, int width) const {
  if (placement == Placement::Policy::random) return Placement::random(mix_seed(seed, 0x5EEDu));
  const auto br = Placement::bottom_right(height, width, patch_h, patch_w);
  return Placement::fixed(patch_row < 0 ? br.row : patch_row, patch_col < 0 ? br.col : patch_col);
}

TrainConfig parse_train_config(std::string_view text, TrainConfig c) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(std::string_view(line).substr(0, eq));
    const auto val = trim(std::string_view(line).substr(eq + 1));
    if (key == "alpha") c.alpha = parse_double(key, val);
    else if (key == "epochs") c.epochs = parse_number<int>(key, val);
    else if (key == "batch") c.batch = parse_number<int>(key, val);
    else if (key == "lambda_ban") c.lambda_ban = parse_double(key, val);
    else if (key == "lambda_stop") c.lambda_stop = parse_double(key, val);
    else if (key == "mode") c.mode = parse_mode(val);
    else if (key == "placement") c.placement = parse_policy(val);
    else if (key == "patch_h") c.patch_h = parse_number<int>(key, val);
    else if (key == "patch_w") c.patch_w = parse_number<int>(key, val);
    else if (key == "patch_row") c.patch_row = parse_number<int>(key, val);
    else if (key == "patch_col") c.patch_col = parse_number<int>(key, val);
    else if (key == "epsilon") c.epsilon = parse_double(key, val);
    else if (key == "init") c.init = parse_double(key, val);
    else if (key == "target_length") c.target_length = parse_number<int>(key, val);
    else if (key == "cycle") c.cycle = parse_number<int>(key, val);
    else if (key == "horizon") c.horizon = parse_number<int>(key, val);
    else if (key == "head_weight") c.head_weight = parse_double(key, val);
    else if (key == "instance_steps") c.instance_steps = parse_number<int>(key, val);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "victim") c.victim = val;
    else throw ValidationError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot read config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), std::move(base));
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& s : steps) {
    nlohmann::ordered_json j{{"step", s.step},   {"epoch", s.epoch},   {"batch", s.batch},
                             {"l_tf", s.l_tf},   {"l_ban", s.l_ban},   {"l_stop", s.l_stop},
                             {"total", s.total}};
    out += j.dump() + "\n";
  }
  return out;
}

VideoTensor Trigger::apply(const VideoTensor& video, std::uint64_t index) const {
  if (mode == PerturbationMode::replacement) return apply_patch(video, patch, index);
  return apply_additive(video, noise, FeasibleSet::additive(epsilon));
}

void save_trigger(const std::filesystem::path& path, const Trigger& trigger, double) {
  if (trigger.mode == PerturbationMode::replacement) {
    save_patch(path, trigger.patch);
  } else {
    save_tensor(path, trigger.noise);
  }
}

Trigger load_trigger(const std::filesystem::path& path, double epsilon) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": missing file");
  char magic[4] = {};
  in.read(magic, 4);
  in.close();
  Trigger t;
  if (std::memcmp(magic, kTensorMagic, 4) == 0) {
    t.mode = PerturbationMode::additive;
    t.epsilon = epsilon;
    t.noise = project(load_tensor(path), FeasibleSet::additive(epsilon));
    return t;
  }
  t.patch = load_patch(path);
  return t;
}

Tensor sign_pgd_step(const Tensor& x, const Tensor& grad, double alpha, const FeasibleSet& set) {
  if (x.shape() != grad.shape()) {
    throw ShapeError("gradient shape " + shape_to_string(grad.shape()) +
                     " does not match perturbation shape " + shape_to_string(x.shape()));
  }
  require_finite(grad, "gradient");
  auto v = x.to_vector();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double g = grad[i];
    const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    v[i] -= alpha * s;
  }
  return project(Tensor(x.shape(), std::move(v)), set);
}

LossAndGrad trigger_loss_grad(const ModelParams& victim, const VideoTensor& video,
                              const Tensor& values, const TrainConfig& cfg, int row, int col) {
  const auto& mc = victim.config();
  const auto leaves = make_leaves(victim, false);
  const auto x = ad::variable(values);
  const auto pooled = cfg.mode == PerturbationMode::replacement
                          ? pooled_with_patch(video, mc, x, row, col)
                          : pooled_with_additive(video, mc, x);
  const auto terms =
      attack_losses(leaves, mc, pooled, cfg.target(), BanSet{}, cfg.weights());
  LossAndGrad out;
  out.terms.l_tf = terms.tf_value();
  out.terms.l_ban = terms.ban_value();
  out.terms.l_stop = terms.stop_value();
  out.terms.total = terms.total_value();
  out.grad = ad::gradient(terms.total, x);
  return out;
}

Trigger initial_trigger(const TrainConfig& cfg, int height, int width, int channels) {
  Trigger t;
  t.mode = cfg.mode;
  if (cfg.mode == PerturbationMode::replacement) {
    t.patch.delta = Tensor::filled(
        {static_cast<std::size_t>(cfg.patch_h), static_cast<std::size_t>(cfg.patch_w),
         static_cast<std::size_t>(channels)},
        cfg.init);
    t.patch.placement = cfg.placement_for(height, width);
  } else {
    t.epsilon = cfg.epsilon;
    t.noise = Tensor::zeros({static_cast<std::size_t>(height), static_cast<std::size_t>(width),
                             static_cast<std::size_t>(channels)});
  }
  return t;
}

namespace {

Trigger with_values(Trigger t, Tensor values) {
  if (t.mode == PerturbationMode::replacement) {
    t.patch.delta = std::move(values);
  } else {
    t.noise = std::move(values);
  }
  return t;
}

}  // namespace

UniversalResult train_universal(const std::vector<VideoTensor>& videos, const ModelParams& victim,
                                const TrainConfig& cfg, const StepObserver& observer) {
  cfg.validate();
  if (videos.empty()) throw ValidationError("surrogate dataset is empty");
  const auto& mc = victim.config();
  cfg.target().validate(mc.vocab);
  UniversalResult result;
  result.trigger = initial_trigger(cfg, mc.height, mc.width, mc.channels);
  PlacementSampler sampler(cfg.mode == PerturbationMode::replacement
                               ? result.trigger.patch.placement
                               : Placement::fixed(0, 0),
                           mc.height, mc.width,
                           cfg.mode == PerturbationMode::replacement ? cfg.patch_h : 1,
                           cfg.mode == PerturbationMode::replacement ? cfg.patch_w : 1);
  const auto set = cfg.feasible();
  Tensor values = result.trigger.values();
  std::vector<std::size_t> order(videos.size());
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    double epoch_total = 0.0;
    int batches = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch));
      const double inv_n = 1.0 / static_cast<double>(last - first);
      std::vector<double> grad_sum(values.size(), 0.0);
      TrainStep s{step, epoch, batches, 0.0, 0.0, 0.0, 0.0};
      for (std::size_t k = first; k < last; ++k) {
        const auto [r, c] = sampler.next();
        const auto lg = trigger_loss_grad(victim, videos[order[k]], values, cfg, r, c);
        for (std::size_t i = 0; i < grad_sum.size(); ++i) grad_sum[i] += lg.grad[i];
        s.l_tf += lg.terms.l_tf * inv_n;
        s.l_ban += lg.terms.l_ban * inv_n;
        s.l_stop += lg.terms.l_stop * inv_n;
        s.total += lg.terms.total * inv_n;
      }
      if (!std::isfinite(s.total)) {
        throw NumericError("loss diverged at step " + std::to_string(step));
      }
      values = sign_pgd_step(values, Tensor(values.shape(), std::move(grad_sum)), cfg.alpha, set);
      result.log.steps.push_back(s);
      if (observer) observer(s, values);
      epoch_total += s.total;
      ++batches;
      ++step;
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epoch_wall_s.push_back(wall);
    result.log.epoch_mean_total.push_back(epoch_total / batches);
    spdlog::info("epoch {} mean loss {:.4f} ({:.1f} s)", epoch, epoch_total / batches, wall);
  }
  result.trigger = with_values(std::move(result.trigger), std::move(values));
  return result;
}

InstanceResult train_instance(const VideoTensor& video, const ModelParams& victim,
                              const TrainConfig& cfg, const StepObserver& observer) {
  cfg.validate();
  const auto& mc = victim.config();
  cfg.target().validate(mc.vocab);
  InstanceResult result;
  result.trigger = initial_trigger(cfg, mc.height, mc.width, mc.channels);
  if (cfg.instance_steps == 0) {
    result.adversarial = video;
    return result;
  }
  const auto set = cfg.feasible();
  PlacementSampler sampler(cfg.mode == PerturbationMode::replacement
                               ? result.trigger.patch.placement
                               : Placement::fixed(0, 0),
                           mc.height, mc.width,
                           cfg.mode == PerturbationMode::replacement ? cfg.patch_h : 1,
                           cfg.mode == PerturbationMode::replacement ? cfg.patch_w : 1);
  const auto [row, col] = sampler.for_index(0);
  Tensor values = result.trigger.values();
  for (int step = 0; step < cfg.instance_steps; ++step) {
    const auto lg = trigger_loss_grad(victim, video, values, cfg, row, col);
    if (!std::isfinite(lg.terms.total)) {
      throw NumericError("loss diverged at step " + std::to_string(step));
    }
    values = sign_pgd_step(values, lg.grad, cfg.alpha, set);
    TrainStep s = lg.terms;
    s.step = step;
    result.log.steps.push_back(s);
    if (observer) observer(s, values);
  }
  result.trigger = with_values(std::move(result.trigger), std::move(values));
  if (result.trigger.mode == PerturbationMode::replacement) {
    result.adversarial = apply_patch(video, result.trigger.patch.delta, row, col);
  } else {
    result.adversarial = result.trigger.apply(video);
  }
  result.final_loss =
      trigger_loss_grad(victim, video, result.trigger.values(), cfg, row, col).terms.total;
  return result;
}

double trigger_loss(const ModelParams& victim, const VideoTensor& video, const Trigger& trigger,
                    const TrainConfig& cfg, std::uint64_t index) {
  TrainConfig c = cfg;
  c.mode = trigger.mode;
  int row = 0, col = 0;
  if (trigger.mode == PerturbationMode::replacement) {
    c.patch_h = trigger.patch.height();
    c.patch_w = trigger.patch.width();
    const PlacementSampler sampler(trigger.patch.placement, victim.config().height,
                                   victim.config().width, c.patch_h, c.patch_w);
    std::tie(row, col) = sampler.for_index(index);
  } else {
    c.epsilon = trigger.epsilon;
  }
  return trigger_loss_grad(victim, video, trigger.values(), c, row, col).terms.total;
}

}  // namespace spongelab
