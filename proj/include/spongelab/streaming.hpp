#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spongelab/model.hpp"
#include "spongelab/trainer.hpp"
#include "spongelab/video.hpp"

namespace spongelab {

enum class LatencySource { synthetic, measured };
std::string to_string(LatencySource s);
LatencySource parse_latency_source(const std::string& s);

/// Per-decision inference latency: wall-clock of decoding, or a + b * tokens.
struct LatencyModel {
  LatencySource source = LatencySource::synthetic;
  double a = 0.05;  // seconds
  double b = 0.01;  // seconds per generated token

  void validate() const;
  double synthetic(std::size_t tokens) const { return a + b * static_cast<double>(tokens); }
  double of(const GenerationTrace& trace) const;
};

struct StreamConfig {
  int window = 8;         // frames per decision
  double interval = 0.5;  // seconds between decisions
  int max_new_tokens = kDefaultMaxNewTokens;
  LatencyModel latency;
  void validate() const;
};

struct SafetyBudget {
  double total = 5.0;
  double human = 2.72;
  double safe() const { return total - human; }
  void validate() const;
};

struct Decision {
  int t = 0;  // 1-based decision index
  std::size_t tokens = 0;
  double tau_raw = 0.0;
  double tau_cum = 0.0;
  bool violation = false;
};

struct LatencyTrace {
  std::vector<Decision> decisions;
  std::optional<int> first_violation;
  double max_tau_cum = 0.0;
  double mean_tokens = 0.0;

  /// JSON lines {t, tokens, tau_raw, tau_cum, violation}.
  std::string to_jsonl() const;
  /// {first_violation, max_tau_cum, mean_tokens}; first_violation is null when none.
  std::string summary_json() const;
};

/// The `window` frames ending at frame t (1-based); before the buffer fills
/// the first frame is repeated on the left.
VideoTensor window_at(const VideoTensor& stream, int t, int window);

/// tau_cum[t] = tau_raw[t] + max(0, tau_cum[t-1] - interval), with tau_cum[0] = 0.
std::vector<double> cum_latency(std::span<const double> raw, double interval);

struct ViolationReport {
  std::vector<bool> flags;
  std::optional<int> first;  // 1-based
};
ViolationReport safety_violations(std::span<const double> cum, const SafetyBudget& budget);

/// One greedy decision per incoming frame, with the trigger (if any) injected
/// into every frame of each window.
LatencyTrace run_stream(const ModelParams& victim, const VideoTensor& stream,
                        const Trigger* trigger, const StreamConfig& cfg,
                        const SafetyBudget& budget);

}  // namespace spongelab
