#include "spongelab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "spongelab/error.hpp"
#include "spongelab/rng.hpp"

namespace spongelab {

namespace {

std::vector<VideoTensor> videos_of(const std::vector<VideoSample>& samples) {
  std::vector<VideoTensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.video);
  return out;
}

std::string fmt_setting(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

}  // namespace

void EvalConfig::validate() const {
  if (decode.max_new_tokens < 1) throw ValidationError("max_new_tokens must be at least 1");
  if (!(decode.temperature >= 0.0)) throw ValidationError("temperature must be non-negative");
  latency.validate();
}

std::string EvalReport::to_jsonl(bool with_latency) const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j{{"video_id", r.video_id},
                             {"clean_tokens", r.clean_tokens},
                             {"adv_tokens", r.adv_tokens},
                             {"ratio", r.ratio}};
    if (with_latency) {
      j["clean_latency_s"] = r.clean_latency;
      j["adv_latency_s"] = r.adv_latency;
      j["overhead_s"] = r.overhead;
    }
    j["clean_stop"] = to_string(r.clean_reason);
    j["adv_stop"] = to_string(r.adv_reason);
    out += j.dump() + "\n";
  }
  return out;
}

std::string EvalReport::summary_json() const {
  nlohmann::ordered_json j{{"count", summary.count},
                           {"mean_clean_tokens", summary.mean_clean_tokens},
                           {"mean_adv_tokens", summary.mean_adv_tokens},
                           {"mean_ratio", summary.mean_ratio},
                           {"mean_clean_latency_s", summary.mean_clean_latency},
                           {"mean_adv_latency_s", summary.mean_adv_latency},
                           {"mean_overhead_s", summary.mean_overhead}};
  return j.dump();
}

std::string EvalReport::summary_csv() const {
  std::ostringstream ss;
  ss.precision(17);
  ss << "count,mean_clean_tokens,mean_adv_tokens,mean_ratio,mean_clean_latency_s,"
        "mean_adv_latency_s,mean_overhead_s\n"
     << summary.count << ',' << summary.mean_clean_tokens << ',' << summary.mean_adv_tokens << ','
     << summary.mean_ratio << ',' << summary.mean_clean_latency << ',' << summary.mean_adv_latency
     << ',' << summary.mean_overhead << '\n';
  return ss.str();
}

EvalSummary summarize(const std::vector<EvalRecord>& records) {
  EvalSummary s;
  s.count = records.size();
  if (records.empty()) return s;
  for (const auto& r : records) {
    s.mean_clean_tokens += static_cast<double>(r.clean_tokens);
    s.mean_adv_tokens += static_cast<double>(r.adv_tokens);
    s.mean_ratio += r.ratio;
    s.mean_clean_latency += r.clean_latency;
    s.mean_adv_latency += r.adv_latency;
    s.mean_overhead += r.overhead;
  }
  const double n = static_cast<double>(records.size());
  s.mean_clean_tokens /= n;
  s.mean_adv_tokens /= n;
  s.mean_ratio /= n;
  s.mean_clean_latency /= n;
  s.mean_adv_latency /= n;
  s.mean_overhead /= n;
  return s;
}

EvalReport evaluate_attack(const ModelParams& victim, const std::vector<VideoSample>& samples,
                           const Trigger* trigger, const EvalConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return samples[x].id < samples[y].id; });
  EvalReport report;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& s = samples[order[k]];
    DecodeConfig dc = cfg.decode;
    dc.seed = mix_seed(cfg.decode.seed, static_cast<std::uint64_t>(s.id));
    const auto clean = generate(victim, s.video, kDefaultPrompt, dc);
    const auto adv_video = trigger ? trigger->apply(s.video, k) : s.video;
    const auto adv = generate(victim, adv_video, kDefaultPrompt, dc);
    EvalRecord r;
    r.video_id = s.id;
    r.clean_tokens = clean.tokens.size();
    r.adv_tokens = adv.tokens.size();
    if (r.clean_tokens == 0) throw Error("clean generation produced no tokens");
    r.ratio = static_cast<double>(r.adv_tokens) / static_cast<double>(r.clean_tokens);
    r.clean_latency = cfg.latency.of(clean);
    r.adv_latency = cfg.latency.of(adv);
    r.overhead = r.adv_latency - r.clean_latency;
    r.clean_reason = clean.reason;
    r.adv_reason = adv.reason;
    report.records.push_back(r);
  }
  report.summary = summarize(report.records);
  return report;
}

std::string to_string(AblationDimension d) {
  switch (d) {
    case AblationDimension::spatial_size: return "spatial_size";
    case AblationDimension::frames: return "frames";
    case AblationDimension::mode: return "mode";
    case AblationDimension::loss_components: return "loss_components";
    case AblationDimension::temperature: return "temperature";
  }
  return "unknown";
}

AblationDimension parse_dimension(const std::string& s) {
  for (auto d : {AblationDimension::spatial_size, AblationDimension::frames,
                 AblationDimension::mode, AblationDimension::loss_components,
                 AblationDimension::temperature}) {
    if (s == to_string(d)) return d;
  }
  throw ValidationError("unknown ablation dimension '" + s + "'");
}

namespace {

AblationRow row_from(std::string setting, EvalReport report) {
  AblationRow row;
  row.setting = std::move(setting);
  row.mean_adv_tokens = report.summary.mean_adv_tokens;
  row.mean_overhead = report.summary.mean_overhead;
  row.mean_ratio = report.summary.mean_ratio;
  row.report = std::move(report);
  spdlog::info("ablation {}: mean adv tokens {:.2f}", row.setting, row.mean_adv_tokens);
  return row;
}

}  // namespace

std::vector<AblationRow> ablate(const ModelParams& victim, AblationDimension dimension,
                                const AblationInputs& in,
                                const std::optional<Trigger>& greedy_trigger) {
  in.train.validate();
  in.eval.validate();
  const auto data_for = [&](const SyntheticConfig& sc) {
    return gen_dataset(in.n_surrogate, in.n_heldout, in.data_seed, in.domain, sc);
  };
  const auto run = [&](const std::string& setting, const TrainConfig& tc,
                       const SyntheticConfig& sc, const EvalConfig& ec) {
    const auto data = data_for(sc);
    const auto trained = train_universal(videos_of(data.train), victim, tc);
    return row_from(setting, evaluate_attack(victim, data.heldout, &trained.trigger, ec));
  };

  std::vector<AblationRow> rows;
  switch (dimension) {
    case AblationDimension::spatial_size:
      for (int side : {4, 8, 16}) {
        TrainConfig tc = in.train;
        tc.patch_h = tc.patch_w = side;
        tc.patch_row = tc.patch_col = -1;
        rows.push_back(run(std::to_string(side) + "x" + std::to_string(side), tc, in.synthetic,
                           in.eval));
      }
      break;
    case AblationDimension::frames:
      for (int frames : {8, 16}) {
        SyntheticConfig sc = in.synthetic;
        sc.frames = frames;
        rows.push_back(run(std::to_string(frames) + " frames", in.train, sc, in.eval));
      }
      break;
    case AblationDimension::mode: {
      TrainConfig additive = in.train;
      additive.mode = PerturbationMode::additive;
      rows.push_back(run("additive", additive, in.synthetic, in.eval));
      // Untrained uniform noise inside the same budget.
      const auto data = data_for(in.synthetic);
      Rng rng(mix_seed(in.train.seed, hash_name("uniform-noise")));
      std::vector<double> noise(static_cast<std::size_t>(in.synthetic.height) *
                                static_cast<std::size_t>(in.synthetic.width) *
                                static_cast<std::size_t>(in.synthetic.channels));
      for (auto& v : noise) v = rng.uniform(-in.train.epsilon, in.train.epsilon);
      Trigger uniform;
      uniform.mode = PerturbationMode::additive;
      uniform.epsilon = in.train.epsilon;
      uniform.noise = Tensor({static_cast<std::size_t>(in.synthetic.height),
                              static_cast<std::size_t>(in.synthetic.width),
                              static_cast<std::size_t>(in.synthetic.channels)},
                             std::move(noise));
      rows.push_back(
          row_from("uniform noise", evaluate_attack(victim, data.heldout, &uniform, in.eval)));
      TrainConfig random = in.train;
      random.mode = PerturbationMode::replacement;
      random.placement = Placement::Policy::random;
      rows.push_back(run("random-position patch", random, in.synthetic, in.eval));
      TrainConfig fixed = in.train;
      fixed.mode = PerturbationMode::replacement;
      fixed.placement = Placement::Policy::fixed;
      rows.push_back(run("fixed patch", fixed, in.synthetic, in.eval));
      break;
    }
    case AblationDimension::loss_components: {
      const struct {
        const char* name;
        double ban, stop;
      } settings[] = {{"tf only", 0.0, 0.0},
                      {"without ban", 0.0, in.train.lambda_stop},
                      {"without stop", in.train.lambda_ban, 0.0},
                      {"full", in.train.lambda_ban, in.train.lambda_stop}};
      for (const auto& s : settings) {
        TrainConfig tc = in.train;
        tc.lambda_ban = s.ban;
        tc.lambda_stop = s.stop;
        rows.push_back(run(s.name, tc, in.synthetic, in.eval));
      }
      break;
    }
    case AblationDimension::temperature: {
      const auto data = data_for(in.synthetic);
      Trigger trigger = greedy_trigger
                            ? *greedy_trigger
                            : train_universal(videos_of(data.train), victim, in.train).trigger;
      for (double temp : {0.0, 0.2, 0.5, 0.7, 1.0, 1.2, 1.5}) {
        EvalConfig ec = in.eval;
        ec.decode.temperature = temp;
        rows.push_back(row_from("T=" + fmt_setting(temp),
                                evaluate_attack(victim, data.heldout, &trigger, ec)));
      }
      break;
    }
  }
  return rows;
}

std::string ablation_jsonl(AblationDimension dimension, const std::vector<AblationRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j{{"dimension", to_string(dimension)},
                             {"setting", r.setting},
                             {"mean_adv_tokens", r.mean_adv_tokens},
                             {"mean_ratio", r.mean_ratio},
                             {"mean_overhead_s", r.mean_overhead}};
    out += j.dump() + "\n";
  }
  return out;
}

TransferResult transfer_check(const ModelParams& victim, const Trigger& trigger,
                              const std::vector<VideoSample>& heldout_in,
                              const std::vector<VideoSample>& heldout_cross,
                              const EvalConfig& cfg) {
  TransferResult t;
  t.in_report = evaluate_attack(victim, heldout_in, &trigger, cfg);
  t.cross_report = evaluate_attack(victim, heldout_cross, &trigger, cfg);
  t.clean_in_domain = t.in_report.summary.mean_clean_tokens;
  t.clean_cross_domain = t.cross_report.summary.mean_clean_tokens;
  t.in_domain = t.in_report.summary.mean_adv_tokens;
  t.cross_domain = t.cross_report.summary.mean_adv_tokens;
  return t;
}

}  // namespace spongelab
