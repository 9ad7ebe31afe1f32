#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>

#include "spongelab/autodiff.hpp"
#include "spongelab/model.hpp"
#include "spongelab/rng.hpp"
#include "spongelab/tensor.hpp"
#include "spongelab/video.hpp"

namespace spongelab {

enum class PerturbationMode { replacement, additive };
std::string to_string(PerturbationMode m);
PerturbationMode parse_mode(const std::string& s);

/// Box of admissible perturbation values: [0,1] for replacement patches,
/// [-eps, eps] for full-frame additive noise.
struct FeasibleSet {
  PerturbationMode mode = PerturbationMode::replacement;
  double epsilon = 0.0;

  static FeasibleSet replacement() { return {}; }
  static FeasibleSet additive(double eps);
  double lower() const { return mode == PerturbationMode::replacement ? 0.0 : -epsilon; }
  double upper() const { return mode == PerturbationMode::replacement ? 1.0 : epsilon; }
};

/// Elementwise clip onto the feasible box.
Tensor project(const Tensor& x, const FeasibleSet& set);

struct Placement {
  enum class Policy { fixed, random };
  Policy policy = Policy::fixed;
  int row = 0, col = 0;     // top-left corner for the fixed policy
  std::uint64_t seed = 0;   // stream seed for the random policy

  static Placement fixed(int row, int col) { return {Policy::fixed, row, col, 0}; }
  static Placement random(std::uint64_t seed) { return {Policy::random, 0, 0, seed}; }
  /// Fixed corner flush with the bottom-right of an H x W frame.
  static Placement bottom_right(int height, int width, int patch_h, int patch_w);
};
std::string to_string(Placement::Policy p);
Placement::Policy parse_policy(const std::string& s);

/// Draws patch corners; each call to `next` is one application.
class PlacementSampler {
 public:
  PlacementSampler(const Placement& placement, int height, int width, int patch_h, int patch_w);
  std::pair<int, int> next();
  /// Corner used when the patch is applied to item `index` of an evaluation set.
  std::pair<int, int> for_index(std::uint64_t index) const;

 private:
  Placement placement_;
  int max_row_, max_col_;
  Rng rng_;
};

/// Universal spatial patch of shape [p_h, p_w, C] plus its placement policy.
struct Patch {
  Tensor delta;
  Placement placement;
  int height() const { return static_cast<int>(delta.dim(0)); }
  int width() const { return static_cast<int>(delta.dim(1)); }
  int channels() const { return static_cast<int>(delta.dim(2)); }
};

/// Overwrites the same region of every frame with `delta`.
VideoTensor apply_patch(const VideoTensor& video, const Tensor& delta, int row, int col);
/// Uses the fixed corner, or the corner drawn for item `index` under a random policy.
VideoTensor apply_patch(const VideoTensor& video, const Patch& patch, std::uint64_t index = 0);
/// Adds the projected full-frame noise [H, W, C] to every frame and clips to [0,1].
VideoTensor apply_additive(const VideoTensor& video, const Tensor& noise, const FeasibleSet& set);

// Differentiable time-pooled patch matrices [N, patch_dim] as functions of
// the perturbation, matching pool_patches of the perturbed video.
ad::Expr pooled_with_patch(const VideoTensor& video, const ModelConfig& cfg, const ad::Expr& delta,
                           int row, int col);
ad::Expr pooled_with_additive(const VideoTensor& video, const ModelConfig& cfg,
                              const ad::Expr& noise);

/// VDPC patch file: magic, u32 version, u32 p_h, p_w, C, u64 placement code
/// (0 fixed + two u32 corner values, 1 random + u64 seed), f64 payload.
void save_patch(const std::filesystem::path& path, const Patch& patch);
Patch load_patch(const std::filesystem::path& path);

}  // namespace spongelab
