#pragma once

#include <span>
#include <vector>

#include "spongelab/autodiff.hpp"
#include "spongelab/model.hpp"

namespace spongelab {

/// Target sequence the decoder is steered towards, with the head-weighting
/// horizon K. The prompt boundary L_p counts BOS plus the prompt.
struct SpongeTarget {
  std::vector<int> tokens;
  int horizon = 16;
  double head_weight = 3.0;
  std::vector<int> prompt = kDefaultPrompt;

  /// A `cycle_len`-token cycle over the first free ids, repeated to `length`.
  static SpongeTarget cycle(int length = 64, int cycle_len = 4, int horizon = 16,
                            double head_weight = 3.0);

  int prompt_boundary() const { return 1 + static_cast<int>(prompt.size()); }
  /// Teacher-forcing input [BOS, prompt, y*] without the final target token.
  std::vector<int> teacher_input() const;
  /// Per-target weights: head_weight for the first K targets, 1 after.
  std::vector<double> weights() const;
  void validate(int vocab) const;
};

struct BanSet {
  std::vector<int> ids = {token::yes, token::no, token::eos};
  void validate(int vocab) const;
};

struct LossWeights {
  double ban = 1.0;
  double stop = 1.0;
  void validate() const;
};

struct LossTerms {
  ad::Expr tf, ban, stop, total;
  double tf_value() const { return tf.value().item(); }
  double ban_value() const { return ban.value().item(); }
  double stop_value() const { return stop.value().item(); }
  double total_value() const { return total.value().item(); }
};

// Losses over the logits of `target.teacher_input()` (one row per input token).

/// Weighted cross-entropy over target rows only, normalised by the weight sum.
ad::Expr masked_tf_from_logits(const ad::Expr& logits, const SpongeTarget& target);
/// Probability mass of the banned ids at the first generation step.
ad::Expr ban_from_logits(const ad::Expr& logits, const SpongeTarget& target, const BanSet& ban);
/// Mean of -log(1 - p(EOS)) over the first K generation steps.
ad::Expr stop_from_logits(const ad::Expr& logits, const SpongeTarget& target);
LossTerms joint_from_logits(const ad::Expr& logits, const SpongeTarget& target, const BanSet& ban,
                            const LossWeights& weights);

/// All three terms for the given pooled visual input.
LossTerms attack_losses(const ParamLeaves& params, const ModelConfig& cfg, const ad::Expr& pooled,
                        const SpongeTarget& target, const BanSet& ban, const LossWeights& weights);

// Whole-video conveniences on a frozen model.
ad::Expr masked_tf_loss(const VideoTensor& video, const SpongeTarget& target,
                        const ModelParams& params);
ad::Expr ban_loss(const VideoTensor& video, const BanSet& ban, const ModelParams& params,
                  std::span<const int> prompt = kDefaultPrompt);
ad::Expr stop_loss(const VideoTensor& video, const SpongeTarget& target, const ModelParams& params);
LossTerms joint_loss(const VideoTensor& video, const SpongeTarget& target, const BanSet& ban,
                     const LossWeights& weights, const ModelParams& params);

}  // namespace spongelab
