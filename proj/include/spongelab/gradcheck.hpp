#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spongelab/model.hpp"
#include "spongelab/trainer.hpp"

namespace spongelab {

struct GradcheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double step = 1e-5;
  double tolerance = 1e-4;
  double max_rel_error = 0.0;
  bool passed = true;
  double wall_s = 0.0;

  void add(GradcheckEntry entry);
  std::string to_json() const;
};

/// Relative errors are taken against max(|analytic|, |numeric|, kGradFloor).
inline constexpr double kGradFloor = 1e-6;

/// Central differences against reverse mode for every primitive, each on a
/// small random tensor contracted with random weights.
GradcheckReport primitive_gradcheck(std::uint64_t seed, double step = 1e-5,
                                    double tolerance = 1e-4);

/// Joint attack loss against every coordinate of the trigger in `cfg` on one
/// video, with the trigger values drawn at random inside its feasible set.
GradcheckEntry trigger_gradcheck(const ModelParams& victim, const VideoTensor& video,
                                 const TrainConfig& cfg, std::uint64_t seed, double step = 1e-5,
                                 double tolerance = 1e-4);

/// The full suite: primitives plus the joint loss over an 8x8 patch on a
/// seeded random model and video.
GradcheckReport run_gradcheck(std::uint64_t seed, double step = 1e-5, double tolerance = 1e-4);

}  // namespace spongelab
