#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "spongelab/model.hpp"
#include "spongelab/objectives.hpp"
#include "spongelab/perturbation.hpp"

namespace spongelab {

/// Settings for universal and per-instance trigger optimization.
struct TrainConfig {
  double alpha = 0.01;
  int epochs = 30;
  int batch = 8;
  double lambda_ban = 1.0;
  double lambda_stop = 1.0;
  PerturbationMode mode = PerturbationMode::replacement;
  Placement::Policy placement = Placement::Policy::fixed;
  int patch_h = 8;
  int patch_w = 8;
  int patch_row = -1;  // -1 selects the bottom-right corner
  int patch_col = -1;
  double epsilon = 0.05;
  double init = 0.5;
  int target_length = 64;
  int cycle = 4;
  int horizon = 16;
  double head_weight = 3.0;
  int instance_steps = 100;
  std::uint64_t seed = 0;
  std::string victim;  // checkpoint directory, used by the command-line tool

  void validate() const;
  SpongeTarget target() const;
  LossWeights weights() const;
  FeasibleSet feasible() const;
  Placement placement_for(int height, int width) const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});

struct TrainStep {
  int step = 0;
  int epoch = 0;
  int batch = 0;
  double l_tf = 0.0, l_ban = 0.0, l_stop = 0.0, total = 0.0;
};

struct TrainLog {
  std::vector<TrainStep> steps;
  std::vector<double> epoch_wall_s;
  std::vector<double> epoch_mean_total;
  /// JSON lines {step, epoch, batch, l_tf, l_ban, l_stop, total}.
  std::string to_jsonl() const;
};

/// A trained perturbation: a replacement patch or full-frame additive noise.
struct Trigger {
  PerturbationMode mode = PerturbationMode::replacement;
  Patch patch;
  Tensor noise;
  double epsilon = 0.0;

  VideoTensor apply(const VideoTensor& video, std::uint64_t index = 0) const;
  /// The optimized tensor (patch values or noise).
  const Tensor& values() const { return mode == PerturbationMode::replacement ? patch.delta : noise; }
};

/// Writes a VDPC file for patches and a VDTN file for additive noise.
void save_trigger(const std::filesystem::path& path, const Trigger& trigger, double epsilon = 0.0);
/// Detects the file kind from its magic bytes.
Trigger load_trigger(const std::filesystem::path& path, double epsilon = 0.05);

/// project(x - alpha * sign(grad)), with sign(0) = 0.
Tensor sign_pgd_step(const Tensor& x, const Tensor& grad, double alpha, const FeasibleSet& set);

struct LossAndGrad {
  TrainStep terms;
  Tensor grad;
};

/// Joint loss on one video and its gradient with respect to the trigger values.
LossAndGrad trigger_loss_grad(const ModelParams& victim, const VideoTensor& video,
                              const Tensor& values, const TrainConfig& cfg, int row, int col);

/// Initial trigger for `cfg` on frames of the given size.
Trigger initial_trigger(const TrainConfig& cfg, int height, int width, int channels);

struct UniversalResult {
  Trigger trigger;
  TrainLog log;
};

using StepObserver = std::function<void(const TrainStep&, const Tensor& values)>;

/// Sign-PGD over shuffled minibatches of `videos`, one step per minibatch.
UniversalResult train_universal(const std::vector<VideoTensor>& videos, const ModelParams& victim,
                                const TrainConfig& cfg, const StepObserver& observer = {});

struct InstanceResult {
  VideoTensor adversarial;
  Trigger trigger;
  TrainLog log;
  double final_loss = 0.0;
};

/// Optimizes a perturbation for a single video for `cfg.instance_steps` steps.
InstanceResult train_instance(const VideoTensor& video, const ModelParams& victim,
                              const TrainConfig& cfg, const StepObserver& observer = {});

/// Joint loss of a video after applying `trigger` at its evaluation placement.
double trigger_loss(const ModelParams& victim, const VideoTensor& video, const Trigger& trigger,
                    const TrainConfig& cfg, std::uint64_t index = 0);

}  // namespace spongelab
