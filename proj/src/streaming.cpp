#include "spongelab/streaming.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "spongelab/error.hpp"

namespace spongelab {

std::string to_string(LatencySource s) {
  return s == LatencySource::synthetic ? "synthetic" : "measured";
}

LatencySource parse_latency_source(const std::string& s) {
  if (s == "synthetic") return LatencySource::synthetic;
  if (s == "measured") return LatencySource::measured;
  throw ValidationError("unknown latency source '" + s + "'");
}

void LatencyModel::validate() const {
  if (!(a >= 0.0) || !(b >= 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw ValidationError("latency coefficients must be finite and non-negative");
  }
}

double LatencyModel::of(const GenerationTrace& trace) const {
  return source == LatencySource::synthetic ? synthetic(trace.tokens.size())
                                            : trace.total_wall_s();
}

void StreamConfig::validate() const {
  if (window < 1) throw ValidationError("window length must be at least 1");
  if (!(interval > 0.0) || !std::isfinite(interval)) {
    throw ValidationError("decision interval must be positive");
  }
  if (max_new_tokens < 1) throw ValidationError("max_new_tokens must be at least 1");
  latency.validate();
}

void SafetyBudget::validate() const {
  if (!(total > human) || !(human >= 0.0) || !std::isfinite(total)) {
    throw ValidationError("safety budget needs T_total > tau_human >= 0");
  }
}

std::string LatencyTrace::to_jsonl() const {
  std::string out;
  for (const auto& d : decisions) {
    nlohmann::ordered_json j{{"t", d.t},
                             {"tokens", d.tokens},
                             {"tau_raw", d.tau_raw},
                             {"tau_cum", d.tau_cum},
                             {"violation", d.violation}};
    out += j.dump() + "\n";
  }
  return out;
}

std::string LatencyTrace::summary_json() const {
  nlohmann::ordered_json j;
  j["first_violation"] = first_violation ? nlohmann::json(*first_violation) : nlohmann::json();
  j["max_tau_cum"] = max_tau_cum;
  j["mean_tokens"] = mean_tokens;
  return j.dump();
}

VideoTensor window_at(const VideoTensor& stream, int t, int window) {
  if (stream.frames() == 0) throw ValidationError("stream is empty");
  if (t < 1 || static_cast<std::size_t>(t) > stream.frames()) {
    throw ValidationError("decision index " + std::to_string(t) + " outside the stream");
  }
  if (window < 1) throw ValidationError("window length must be at least 1");
  std::vector<std::size_t> idx;
  for (int k = t - window + 1; k <= t; ++k) idx.push_back(static_cast<std::size_t>(std::max(k, 1) - 1));
  return stream.select_frames(idx);
}

std::vector<double> cum_latency(std::span<const double> raw, double interval) {
  if (!(interval > 0.0)) throw ValidationError("decision interval must be positive");
  std::vector<double> out;
  out.reserve(raw.size());
  double prev = 0.0;
  for (double r : raw) {
    if (!(r >= 0.0)) throw ValidationError("latency values must be non-negative");
    prev = r + std::max(0.0, prev - interval);
    out.push_back(prev);
  }
  return out;
}

ViolationReport safety_violations(std::span<const double> cum, const SafetyBudget& budget) {
  budget.validate();
  ViolationReport r;
  const double safe = budget.safe();
  for (std::size_t i = 0; i < cum.size(); ++i) {
    const bool v = cum[i] > safe;
    r.flags.push_back(v);
    if (v && !r.first) r.first = static_cast<int>(i) + 1;
  }
  return r;
}

LatencyTrace run_stream(const ModelParams& victim, const VideoTensor& stream,
                        const Trigger* trigger, const StreamConfig& cfg,
                        const SafetyBudget& budget) {
  cfg.validate();
  budget.validate();
  const int n = static_cast<int>(stream.frames());
  DecodeConfig dc;
  dc.max_new_tokens = cfg.max_new_tokens;
  std::vector<double> raw;
  std::vector<std::size_t> tokens;
  for (int t = 1; t <= n; ++t) {
    auto window = window_at(stream, t, cfg.window);
    if (trigger) window = trigger->apply(window, static_cast<std::uint64_t>(t));
    const auto trace = generate(victim, window, kDefaultPrompt, dc);
    tokens.push_back(trace.tokens.size());
    raw.push_back(cfg.latency.of(trace));
  }
  const auto cum = cum_latency(raw, cfg.interval);
  const auto flags = safety_violations(cum, budget);
  LatencyTrace out;
  double token_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.decisions.push_back({i + 1, tokens[k], raw[k], cum[k], flags.flags[k]});
    out.max_tau_cum = std::max(out.max_tau_cum, cum[k]);
    token_sum += static_cast<double>(tokens[k]);
  }
  out.first_violation = flags.first;
  out.mean_tokens = n > 0 ? token_sum / n : 0.0;
  return out;
}

}  // namespace spongelab
