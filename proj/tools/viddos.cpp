// Command-line front end for the sponge-attack lab.

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "spongelab/error.hpp"
#include "spongelab/evaluation.hpp"
#include "spongelab/gradcheck.hpp"
#include "spongelab/model.hpp"
#include "spongelab/streaming.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/trainer.hpp"

namespace fs = std::filesystem;
using namespace spongelab;

namespace {

constexpr const char* kKeysHelp = R"(Config file: one `key = value` per line, `#` starts a comment.
Unknown keys are rejected.

Patch training keys:
  victim           checkpoint directory of the pretrained model
  alpha epochs batch lambda_ban lambda_stop
  mode             patch | additive
  placement        fixed | random
  patch_h patch_w patch_row patch_col   (row/col -1 = bottom-right corner)
  epsilon init target_length cycle horizon head_weight instance_steps
Data keys:
  domain           A | B (surrogate and in-domain held-out set)
  n_train n_heldout data_seed frames
  train_data heldout_data   dataset directories written by gen-data;
                            generated from data_seed when absent
Pretraining keys:
  pretrain_epochs pretrain_lr pretrain_batch accuracy_gate describe_length
  n_per_domain n_static n_window_streams corpus_seed
Evaluation keys:
  patch            trigger file (.vdpc patch or .vdtn additive noise)
  max_new_tokens temperature
  latency          synthetic | measured
  latency_a latency_b csv
  dimension        spatial_size | frames | mode | loss_components | temperature
Streaming keys:
  stream_frames window interval t_total tau_human

--seed drives the run's own randomness: model init for pretrain, clip seeds
for gen-data and stream-sim, patch optimization for train-patch, ablate and
transfer, sampling for evaluate, and the probe point for gradcheck.
Log verbosity comes from VIDDOS_LOG (trace, debug, info, warn, error, off).)";

struct RunConfig {
  TrainConfig train;
  Domain domain = Domain::a;
  int n_train = 32;
  int n_heldout = 16;
  std::uint64_t data_seed = 1234;
  SyntheticConfig synthetic;
  std::string train_data, heldout_data;

  PretrainConfig pretrain;
  int n_per_domain = 256;
  int n_static = 32;
  int n_window_streams = 48;
  std::uint64_t corpus_seed = 11;

  std::string patch;
  int max_new_tokens = kDefaultMaxNewTokens;
  double temperature = 0.0;
  LatencyModel latency;
  bool csv = false;
  AblationDimension dimension = AblationDimension::loss_components;

  int stream_frames = 40;
  int window = 8;
  double interval = 0.5;
  SafetyBudget budget;
};

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ValidationError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

bool boolean(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "': expected true or false");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> keys{
      {"domain", [&](auto&, auto& v) { c.domain = parse_domain(v); }},
      {"n_train", [&](auto& k, auto& v) { c.n_train = number<int>(k, v); }},
      {"n_heldout", [&](auto& k, auto& v) { c.n_heldout = number<int>(k, v); }},
      {"data_seed", [&](auto& k, auto& v) { c.data_seed = number<std::uint64_t>(k, v); }},
      {"frames", [&](auto& k, auto& v) { c.synthetic.frames = number<int>(k, v); }},
      {"train_data", [&](auto&, auto& v) { c.train_data = v; }},
      {"heldout_data", [&](auto&, auto& v) { c.heldout_data = v; }},
      {"pretrain_epochs", [&](auto& k, auto& v) { c.pretrain.epochs = number<int>(k, v); }},
      {"pretrain_lr", [&](auto& k, auto& v) { c.pretrain.lr = number<double>(k, v); }},
      {"pretrain_batch", [&](auto& k, auto& v) { c.pretrain.batch = number<int>(k, v); }},
      {"accuracy_gate", [&](auto& k, auto& v) { c.pretrain.accuracy_gate = number<double>(k, v); }},
      {"describe_length",
       [&](auto& k, auto& v) { c.pretrain.describe_length = number<int>(k, v); }},
      {"n_per_domain", [&](auto& k, auto& v) { c.n_per_domain = number<int>(k, v); }},
      {"n_static", [&](auto& k, auto& v) { c.n_static = number<int>(k, v); }},
      {"n_window_streams", [&](auto& k, auto& v) { c.n_window_streams = number<int>(k, v); }},
      {"corpus_seed", [&](auto& k, auto& v) { c.corpus_seed = number<std::uint64_t>(k, v); }},
      {"patch", [&](auto&, auto& v) { c.patch = v; }},
      {"max_new_tokens", [&](auto& k, auto& v) { c.max_new_tokens = number<int>(k, v); }},
      {"temperature", [&](auto& k, auto& v) { c.temperature = number<double>(k, v); }},
      {"latency", [&](auto&, auto& v) { c.latency.source = parse_latency_source(v); }},
      {"latency_a", [&](auto& k, auto& v) { c.latency.a = number<double>(k, v); }},
      {"latency_b", [&](auto& k, auto& v) { c.latency.b = number<double>(k, v); }},
      {"csv", [&](auto& k, auto& v) { c.csv = boolean(k, v); }},
      {"dimension", [&](auto&, auto& v) { c.dimension = parse_dimension(v); }},
      {"stream_frames", [&](auto& k, auto& v) { c.stream_frames = number<int>(k, v); }},
      {"window", [&](auto& k, auto& v) { c.window = number<int>(k, v); }},
      {"interval", [&](auto& k, auto& v) { c.interval = number<double>(k, v); }},
      {"t_total", [&](auto& k, auto& v) { c.budget.total = number<double>(k, v); }},
      {"tau_human", [&](auto& k, auto& v) { c.budget.human = number<double>(k, v); }},
  };
  std::istringstream in(text);
  std::string line, train_lines;
  while (std::getline(in, line)) {
    std::string body = line;
    if (const auto hash = body.find('#'); hash != std::string::npos) body.resize(hash);
    const auto eq = body.find('=');
    const std::string key = trim(eq == std::string::npos ? body : body.substr(0, eq));
    if (const auto it = keys.find(key); it != keys.end() && eq != std::string::npos) {
      it->second(key, trim(body.substr(eq + 1)));
      train_lines += "\n";  // keep line numbers aligned for the train parser
    } else {
      train_lines += body + "\n";
    }
  }
  c.train = parse_train_config(train_lines);
  if (c.n_train < 2 || c.n_heldout < 1) {
    throw ValidationError("n_train must be at least 2 and n_heldout at least 1");
  }
  if (c.stream_frames < 1) throw ValidationError("stream_frames must be at least 1");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return parse_run_config("");
  std::ifstream in(path);
  if (!in) throw ValidationError(path + ": cannot read config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

ModelParams load_victim(const RunConfig& c) {
  if (c.train.victim.empty()) throw ValidationError("config key 'victim' is required");
  return load_params(c.train.victim);
}

DatasetSplit data_for(const RunConfig& c, Domain domain) {
  DatasetSplit split = gen_dataset(c.n_train, c.n_heldout, c.data_seed, domain, c.synthetic);
  if (!c.train_data.empty()) split.train = load_dataset(c.train_data);
  if (!c.heldout_data.empty()) split.heldout = load_dataset(c.heldout_data);
  return split;
}

std::vector<VideoTensor> videos_of(const std::vector<VideoSample>& samples) {
  std::vector<VideoTensor> out;
  for (const auto& s : samples) out.push_back(s.video);
  return out;
}

EvalConfig eval_config(const RunConfig& c, std::uint64_t seed) {
  EvalConfig ec;
  ec.decode.temperature = c.temperature;
  ec.decode.max_new_tokens = c.max_new_tokens;
  ec.decode.seed = seed;
  ec.latency = c.latency;
  return ec;
}

std::optional<Trigger> trigger_of(const RunConfig& c) {
  if (c.patch.empty()) return std::nullopt;
  return load_trigger(c.patch, c.train.epsilon);
}

Trigger trained_or_loaded(const RunConfig& c, const ModelParams& victim,
                          const std::vector<VideoSample>& surrogate) {
  if (auto t = trigger_of(c)) return *t;
  return train_universal(videos_of(surrogate), victim, c.train).trigger;
}

struct Context {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

fs::path out_dir(const Context& ctx) {
  fs::create_directories(ctx.out);
  return ctx.out;
}

int cmd_pretrain(const Context& ctx) {
  RunConfig c = load_run_config(ctx.config);
  c.pretrain.seed = ctx.seed;
  const auto corpus = gen_pretrain_corpus(c.n_per_domain, c.n_static, 64, c.corpus_seed,
                                          c.synthetic, c.n_window_streams);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pretrain(corpus.train, corpus.heldout, ModelConfig{}, c.pretrain);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto dir = out_dir(ctx);
  save_params(dir / "victim", result.params);
  double clean = 0.0;
  const auto probe = gen_dataset(2, 16, c.data_seed, Domain::a, c.synthetic).heldout;
  DecodeConfig dc;
  dc.max_new_tokens = c.max_new_tokens;
  for (const auto& s : probe) {
    clean += static_cast<double>(generate(result.params, s.video, kDefaultPrompt, dc).tokens.size());
  }
  nlohmann::ordered_json j{{"heldout_accuracy", result.heldout_accuracy},
                           {"gate", c.pretrain.accuracy_gate},
                           {"gate_passed", result.gate_passed},
                           {"mean_clean_tokens", clean / static_cast<double>(probe.size())},
                           {"epoch_loss", result.epoch_loss},
                           {"train_samples", corpus.train.size()},
                           {"wall_s", wall}};
  write_text(dir / "pretrain.json", j.dump());
  std::cout << j.dump() << "\n";
  if (!result.gate_passed) {
    spdlog::error("held-out accuracy {:.3f} is below the gate {:.2f}", result.heldout_accuracy,
                  c.pretrain.accuracy_gate);
    return 2;
  }
  return 0;
}

int cmd_gen_data(const Context& ctx) {
  const RunConfig c = load_run_config(ctx.config);
  const auto split = gen_dataset(c.n_train, c.n_heldout, ctx.seed, c.domain, c.synthetic);
  const auto dir = out_dir(ctx);
  save_dataset(dir / "train", split.train);
  save_dataset(dir / "heldout", split.heldout);
  nlohmann::ordered_json j{{"train", split.train.size()},
                           {"heldout", split.heldout.size()},
                           {"domain", to_string(c.domain)},
                           {"seed", ctx.seed}};
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_train_patch(const Context& ctx) {
  RunConfig c = load_run_config(ctx.config);
  c.train.seed = ctx.seed;
  const auto victim = load_victim(c);
  const auto data = data_for(c, c.domain);
  const auto result = train_universal(videos_of(data.train), victim, c.train);
  const auto dir = out_dir(ctx);
  const fs::path file =
      dir / (c.train.mode == PerturbationMode::replacement ? "patch.vdpc" : "noise.vdtn");
  save_trigger(file, result.trigger);
  write_text(dir / "train_log.jsonl", result.log.to_jsonl());
  double wall = 0.0;
  for (double w : result.log.epoch_wall_s) wall += w;
  nlohmann::ordered_json j{{"trigger", file.string()},
                           {"mode", to_string(c.train.mode)},
                           {"steps", result.log.steps.size()},
                           {"final_epoch_loss", result.log.epoch_mean_total.empty()
                                                    ? 0.0
                                                    : result.log.epoch_mean_total.back()},
                           {"wall_s", wall}};
  write_text(dir / "train_summary.json", j.dump());
  std::cout << j.dump() << "\n";
  return 0;
}

void write_eval(const fs::path& dir, const std::string& stem, const EvalReport& report,
                const RunConfig& c) {
  write_text(dir / (stem + ".jsonl"),
             report.to_jsonl(c.latency.source == LatencySource::synthetic));
  write_text(dir / (stem + "_summary.json"), report.summary_json());
  if (c.csv) write_text(dir / (stem + "_summary.csv"), report.summary_csv());
}

int cmd_evaluate(const Context& ctx) {
  const RunConfig c = load_run_config(ctx.config);
  const auto victim = load_victim(c);
  const auto data = data_for(c, c.domain);
  const auto trigger = trigger_of(c);
  const auto report =
      evaluate_attack(victim, data.heldout, trigger ? &*trigger : nullptr, eval_config(c, ctx.seed));
  write_eval(out_dir(ctx), "eval", report, c);
  std::cout << report.summary_json() << "\n";
  return 0;
}

int cmd_ablate(const Context& ctx) {
  RunConfig c = load_run_config(ctx.config);
  c.train.seed = ctx.seed;
  const auto victim = load_victim(c);
  AblationInputs in;
  in.train = c.train;
  in.eval = eval_config(c, 0);
  in.synthetic = c.synthetic;
  in.domain = c.domain;
  in.n_surrogate = c.n_train;
  in.n_heldout = c.n_heldout;
  in.data_seed = c.data_seed;
  const auto rows = ablate(victim, c.dimension, in, trigger_of(c));
  const auto dir = out_dir(ctx);
  write_text(dir / "ablation.jsonl", ablation_jsonl(c.dimension, rows));
  std::string records;
  for (const auto& row : rows) {
    std::istringstream lines(row.report.to_jsonl());
    std::string line;
    while (std::getline(lines, line)) {
      auto j = nlohmann::ordered_json::parse(line);
      nlohmann::ordered_json tagged{{"setting", row.setting}};
      tagged.update(j);
      records += tagged.dump() + "\n";
    }
  }
  write_text(dir / "ablation_records.jsonl", records);
  std::cout << ablation_jsonl(c.dimension, rows);
  return 0;
}

int cmd_stream_sim(const Context& ctx) {
  const RunConfig c = load_run_config(ctx.config);
  const auto victim = load_victim(c);
  StreamConfig sc;
  sc.window = c.window;
  sc.interval = c.interval;
  sc.max_new_tokens = c.max_new_tokens;
  sc.latency = c.latency;
  const auto stream = gen_stream(c.stream_frames, ctx.seed, c.domain, c.synthetic);
  const auto dir = out_dir(ctx);
  const auto clean = run_stream(victim, stream, nullptr, sc, c.budget);
  write_text(dir / "stream_clean.jsonl", clean.to_jsonl());
  nlohmann::ordered_json j{{"tau_safe", c.budget.safe()},
                           {"clean", nlohmann::json::parse(clean.summary_json())}};
  if (const auto trigger = trigger_of(c)) {
    const auto attacked = run_stream(victim, stream, &*trigger, sc, c.budget);
    write_text(dir / "stream_patched.jsonl", attacked.to_jsonl());
    j["patched"] = nlohmann::json::parse(attacked.summary_json());
  }
  write_text(dir / "stream_summary.json", j.dump());
  std::cout << j.dump() << "\n";
  return 0;
}

Domain other(Domain d) { return d == Domain::a ? Domain::b : Domain::a; }

int cmd_transfer(const Context& ctx) {
  RunConfig c = load_run_config(ctx.config);
  c.train.seed = ctx.seed;
  const auto victim = load_victim(c);
  const auto in_domain = data_for(c, c.domain);
  const auto cross = gen_dataset(c.n_train, c.n_heldout, c.data_seed, other(c.domain), c.synthetic);
  const auto trigger = trained_or_loaded(c, victim, in_domain.train);
  const auto result =
      transfer_check(victim, trigger, in_domain.heldout, cross.heldout, eval_config(c, 0));
  const auto dir = out_dir(ctx);
  write_eval(dir, "transfer_in", result.in_report, c);
  write_eval(dir, "transfer_cross", result.cross_report, c);
  nlohmann::ordered_json j{{"train_domain", to_string(c.domain)},
                           {"clean_in_domain", result.clean_in_domain},
                           {"clean_cross_domain", result.clean_cross_domain},
                           {"in_domain", result.in_domain},
                           {"cross_domain", result.cross_domain}};
  write_text(dir / "transfer.json", j.dump());
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_gradcheck(const Context& ctx) {
  (void)load_run_config(ctx.config);  // validates the file when one is given
  const auto report = run_gradcheck(ctx.seed);
  if (!ctx.out.empty()) write_text(out_dir(ctx) / "gradcheck.json", report.to_json());
  for (const auto& e : report.entries) {
    spdlog::info("{:<20} {:>5} coords  max rel err {:.3e}  {}", e.name, e.coordinates,
                 e.max_rel_error, e.passed ? "ok" : "FAIL");
  }
  nlohmann::ordered_json j{{"max_rel_error", report.max_rel_error},
                           {"tolerance", report.tolerance},
                           {"passed", report.passed},
                           {"checks", report.entries.size()},
                           {"wall_s", report.wall_s}};
  std::cout << j.dump() << "\n";
  return report.passed ? 0 : 2;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("viddos");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("VIDDOS_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unrecognised names to off; only accept real level names.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Universal sponge-patch lab for a toy video-language model", "viddos"};
  app.footer(kKeysHelp);
  app.require_subcommand(1);

  Context ctx;
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Context&);
    bool needs_out;
  };
  const Command commands[] = {
      {"pretrain", "Pretrain the victim and write <out>/victim", cmd_pretrain, true},
      {"gen-data", "Write <out>/train and <out>/heldout datasets", cmd_gen_data, true},
      {"train-patch", "Optimize a universal trigger", cmd_train_patch, true},
      {"evaluate", "Clean vs attacked generation on the held-out set", cmd_evaluate, true},
      {"ablate", "Retrain and evaluate along one ablation dimension", cmd_ablate, true},
      {"stream-sim", "Simulate the onboard pipeline with and without the trigger",
       cmd_stream_sim, true},
      {"transfer", "Evaluate an in-domain trigger on both domains", cmd_transfer, true},
      {"gradcheck", "Finite-difference check of every gradient", cmd_gradcheck, false},
  };
  std::map<CLI::App*, const Command*> by_app;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("config", ctx.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", ctx.seed, "seed for this run")->default_val(0);
    auto* out = sub->add_option("--out", ctx.out, "output directory");
    if (cmd.needs_out) out->required();
    by_app[sub] = &cmd;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const Command* cmd = by_app.at(app.get_subcommands().front());
  try {
    return cmd->run(ctx);
  } catch (const ValidationError& e) {
    std::cerr << "viddos " << cmd->name << ": " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "viddos " << cmd->name << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "viddos " << cmd->name << ": " << e.what() << "\n";
    return 2;
  }
}
