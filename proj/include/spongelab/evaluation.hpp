#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spongelab/model.hpp"
#include "spongelab/streaming.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/trainer.hpp"

namespace spongelab {

struct EvalConfig {
  DecodeConfig decode;  // sampling seeds are derived per video from decode.seed
  LatencyModel latency;
  void validate() const;
};

struct EvalRecord {
  int video_id = 0;
  std::size_t clean_tokens = 0;
  std::size_t adv_tokens = 0;
  double ratio = 1.0;
  double clean_latency = 0.0;
  double adv_latency = 0.0;
  double overhead = 0.0;
  StopReason clean_reason = StopReason::eos;
  StopReason adv_reason = StopReason::eos;
};

struct EvalSummary {
  std::size_t count = 0;
  double mean_clean_tokens = 0.0;
  double mean_adv_tokens = 0.0;
  double mean_ratio = 0.0;
  double mean_clean_latency = 0.0;
  double mean_adv_latency = 0.0;
  double mean_overhead = 0.0;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  EvalSummary summary;

  /// One JSON object per record. Latency fields are dropped when
  /// `with_latency` is false, which makes measured-latency reports comparable.
  std::string to_jsonl(bool with_latency = true) const;
  std::string summary_json() const;
  /// Header plus one row of summary means.
  std::string summary_csv() const;
};

EvalSummary summarize(const std::vector<EvalRecord>& records);

/// Clean and attacked generation for every sample, in ascending id order.
/// Without a trigger both arms see the clean video.
EvalReport evaluate_attack(const ModelParams& victim, const std::vector<VideoSample>& samples,
                           const Trigger* trigger, const EvalConfig& cfg);

enum class AblationDimension { spatial_size, frames, mode, loss_components, temperature };
std::string to_string(AblationDimension d);
AblationDimension parse_dimension(const std::string& s);

/// Everything an ablation run needs besides the victim. Surrogate and
/// held-out sets are regenerated per setting so the frame count can vary.
struct AblationInputs {
  TrainConfig train;
  EvalConfig eval;
  SyntheticConfig synthetic;
  Domain domain = Domain::a;
  int n_surrogate = 32;
  int n_heldout = 16;
  std::uint64_t data_seed = 1234;
};

struct AblationRow {
  std::string setting;
  double mean_adv_tokens = 0.0;
  double mean_overhead = 0.0;
  double mean_ratio = 0.0;
  EvalReport report;
};

/// One row per setting along `dimension`, every other knob at its default.
/// The temperature sweep reuses one greedy-trained patch (`greedy_trigger` if
/// supplied, otherwise trained here).
std::vector<AblationRow> ablate(const ModelParams& victim, AblationDimension dimension,
                                const AblationInputs& inputs,
                                const std::optional<Trigger>& greedy_trigger = std::nullopt);

std::string ablation_jsonl(AblationDimension dimension, const std::vector<AblationRow>& rows);

struct TransferResult {
  double clean_in_domain = 0.0;
  double clean_cross_domain = 0.0;
  double in_domain = 0.0;     // mean attacked tokens on the training domain
  double cross_domain = 0.0;  // mean attacked tokens on the other domain
  EvalReport in_report, cross_report;
};

TransferResult transfer_check(const ModelParams& victim, const Trigger& trigger,
                              const std::vector<VideoSample>& heldout_in,
                              const std::vector<VideoSample>& heldout_cross,
                              const EvalConfig& cfg);

}  // namespace spongelab
