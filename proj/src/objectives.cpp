#include "spongelab/objectives.hpp"

#include <cmath>

#include "spongelab/error.hpp"

namespace spongelab {

namespace {

constexpr double kStopFloor = 1e-12;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void require_rows(const ad::Expr& logits, const SpongeTarget& target) {
  const auto rows = target.teacher_input().size();
  if (logits.value().rank() != 2 || logits.shape()[0] != rows) {
    throw ShapeError("expected " + std::to_string(rows) + " logit rows, got " +
                     shape_to_string(logits.shape()));
  }
}

// Probability of column `col` on each of `rows` consecutive rows starting at `first`.
ad::Expr column_probs(const ad::Expr& logits, std::size_t first, std::size_t rows,
                      const std::vector<int>& cols) {
  const std::size_t v = logits.shape()[1];
  const auto probs = ad::softmax_rows(ad::slice_rows(logits, first, first + rows));
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < rows; ++r)
    for (int c : cols) idx.push_back(r * v + sz(c));
  return ad::gather(probs, idx, {rows, cols.size()});
}

}  // namespace

SpongeTarget SpongeTarget::cycle(int length, int cycle_len, int horizon, double head_weight) {
  SpongeTarget t;
  for (int i = 0; i < length; ++i) t.tokens.push_back(token::first_free + i % cycle_len);
  t.horizon = horizon;
  t.head_weight = head_weight;
  return t;
}

std::vector<int> SpongeTarget::teacher_input() const {
  if (tokens.empty()) throw ValidationError("target sequence is empty");
  std::vector<int> seq{token::bos};
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), tokens.begin(), tokens.end() - 1);
  return seq;
}

std::vector<double> SpongeTarget::weights() const {
  std::vector<double> w(tokens.size(), 1.0);
  for (std::size_t i = 0; i < w.size() && i < sz(horizon); ++i) w[i] = head_weight;
  return w;
}

void SpongeTarget::validate(int vocab) const {
  if (tokens.empty()) throw ValidationError("target sequence is empty");
  for (int t : tokens) {
    if (t < token::first_free || t >= vocab) {
      throw ValidationError("target token " + std::to_string(t) + " is not in the sponge alphabet");
    }
  }
  for (int t : prompt) {
    if (t < 0 || t >= vocab) throw ValidationError("prompt token out of range");
  }
  if (horizon < 1 || sz(horizon) > tokens.size()) {
    throw ValidationError("horizon K must lie in [1, len(target)]");
  }
  if (!(head_weight > 1.0) || !std::isfinite(head_weight)) {
    throw ValidationError("head weight must be finite and greater than 1");
  }
}

void BanSet::validate(int vocab) const {
  if (ids.empty()) throw ValidationError("ban set is empty");
  for (int id : ids) {
    if (id < 0 || id >= vocab) throw ValidationError("banned id out of range");
  }
}

void LossWeights::validate() const {
  if (!(ban >= 0.0) || !(stop >= 0.0) || !std::isfinite(ban) || !std::isfinite(stop)) {
    throw ValidationError("loss weights must be finite and non-negative");
  }
}

ad::Expr masked_tf_from_logits(const ad::Expr& logits, const SpongeTarget& target) {
  require_rows(logits, target);
  const std::size_t first = sz(target.prompt_boundary() - 1);
  const std::size_t n = target.tokens.size();
  const auto ce = ad::cross_entropy_rows(ad::slice_rows(logits, first, first + n), target.tokens);
  const auto w = target.weights();
  double wsum = 0.0;
  for (double x : w) wsum += x;
  return ad::scale(ad::sum(ad::mul(ce, ad::constant(Tensor::vector(w)))), 1.0 / wsum);
}

ad::Expr ban_from_logits(const ad::Expr& logits, const SpongeTarget& target, const BanSet& ban) {
  const std::size_t first = sz(target.prompt_boundary() - 1);
  if (logits.value().rank() != 2 || logits.shape()[0] <= first) {
    throw ShapeError("logits do not reach the first generation step");
  }
  return ad::sum(column_probs(logits, first, 1, ban.ids));
}

ad::Expr stop_from_logits(const ad::Expr& logits, const SpongeTarget& target) {
  require_rows(logits, target);
  if (target.horizon < 1 || sz(target.horizon) > target.tokens.size()) {
    throw ValidationError("horizon K must lie in [1, len(target)]");
  }
  const std::size_t first = sz(target.prompt_boundary() - 1);
  const auto k = sz(target.horizon);
  const auto p_eos = column_probs(logits, first, k, {token::eos});
  for (double p : p_eos.value().data()) {
    if (p >= 1.0) throw NumericError("p(EOS) = 1: early-termination loss is not finite");
  }
  const auto nll = ad::log(ad::affine(p_eos, -1.0, 1.0), kStopFloor);
  return ad::scale(ad::sum(nll), -1.0 / static_cast<double>(k));
}

LossTerms joint_from_logits(const ad::Expr& logits, const SpongeTarget& target, const BanSet& ban,
                            const LossWeights& weights) {
  weights.validate();
  LossTerms t;
  t.tf = masked_tf_from_logits(logits, target);
  t.ban = ban_from_logits(logits, target, ban);
  t.stop = stop_from_logits(logits, target);
  t.total = ad::add(ad::add(t.tf, ad::scale(t.ban, weights.ban)), ad::scale(t.stop, weights.stop));
  return t;
}

LossTerms attack_losses(const ParamLeaves& params, const ModelConfig& cfg, const ad::Expr& pooled,
                        const SpongeTarget& target, const BanSet& ban, const LossWeights& weights) {
  target.validate(cfg.vocab);
  ban.validate(cfg.vocab);
  const auto logits = forward_logits(params, cfg, pooled, target.teacher_input());
  return joint_from_logits(logits, target, ban, weights);
}

namespace {

ad::Expr frozen_logits(const VideoTensor& video, std::span<const int> text,
                       const ModelParams& params) {
  const auto leaves = make_leaves(params, false);
  return forward_logits(leaves, params.config(),
                        ad::constant(pool_patches(video, params.config())), text);
}

}  // namespace

ad::Expr masked_tf_loss(const VideoTensor& video, const SpongeTarget& target,
                        const ModelParams& params) {
  target.validate(params.config().vocab);
  return masked_tf_from_logits(frozen_logits(video, target.teacher_input(), params), target);
}

ad::Expr ban_loss(const VideoTensor& video, const BanSet& ban, const ModelParams& params,
                  std::span<const int> prompt) {
  ban.validate(params.config().vocab);
  SpongeTarget context;
  context.prompt.assign(prompt.begin(), prompt.end());
  std::vector<int> text{token::bos};
  text.insert(text.end(), prompt.begin(), prompt.end());
  return ban_from_logits(frozen_logits(video, text, params), context, ban);
}

ad::Expr stop_loss(const VideoTensor& video, const SpongeTarget& target,
                   const ModelParams& params) {
  target.validate(params.config().vocab);
  return stop_from_logits(frozen_logits(video, target.teacher_input(), params), target);
}

LossTerms joint_loss(const VideoTensor& video, const SpongeTarget& target, const BanSet& ban,
                     const LossWeights& weights, const ModelParams& params) {
  target.validate(params.config().vocab);
  ban.validate(params.config().vocab);
  return joint_from_logits(frozen_logits(video, target.teacher_input(), params), target, ban,
                           weights);
}

}  // namespace spongelab
