#include "spongelab/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "spongelab/error.hpp"
#include "spongelab/rng.hpp"
#include "spongelab/tensor_io.hpp"

namespace spongelab {

namespace {

constexpr double kNormEps = 1e-8;
constexpr double kMasked = -1e30;

std::string layer_key(int l, const char* name) {
  return "layer" + std::to_string(l) + "." + name;
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

// Sinusoidal encoding of text position `pos`, written into `out` (length d).
void sinusoid(std::size_t pos, std::size_t d, double* out) {
  for (std::size_t k = 0; k < d; k += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(d));
    out[k] = std::sin(static_cast<double>(pos) * freq);
    if (k + 1 < d) out[k + 1] = std::cos(static_cast<double>(pos) * freq);
  }
}

Tensor sinusoid_table(std::size_t len, std::size_t d) {
  std::vector<double> t(len * d);
  for (std::size_t i = 0; i < len; ++i) sinusoid(i, d, t.data() + i * d);
  return Tensor({len, d}, std::move(t));
}

const ad::Expr& leaf(const ParamLeaves& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw Error("missing parameter " + name);
  return it->second;
}

struct LayerCache {
  std::vector<Tensor> keys, values;
};

// Runs the decoder stack on `h` [rows, D] under the additive `mask`.
ad::Expr run_stack(const ParamLeaves& p, const ModelConfig& cfg, ad::Expr h, const ad::Expr& mask,
                   LayerCache* cache) {
  const std::size_t d = sz(cfg.d_model), dh = d / sz(cfg.heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto a = ad::mul_row(ad::layer_norm_rows(h, kNormEps), leaf(p, layer_key(l, "ln1")));
    const auto q = ad::matmul(a, leaf(p, layer_key(l, "wq")));
    const auto k = ad::matmul(a, leaf(p, layer_key(l, "wk")));
    const auto v = ad::matmul(a, leaf(p, layer_key(l, "wv")));
    if (cache) {
      cache->keys.push_back(k.value());
      cache->values.push_back(v.value());
    }
    std::vector<ad::Expr> heads;
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const std::size_t b = sz(hd) * dh, e = b + dh;
      const auto scores = ad::add(
          ad::scale(ad::matmul_nt(ad::slice_cols(q, b, e), ad::slice_cols(k, b, e)), inv_sqrt),
          mask);
      heads.push_back(ad::matmul(ad::softmax_rows(scores), ad::slice_cols(v, b, e)));
    }
    h = ad::add(h, ad::matmul(ad::concat_cols(heads), leaf(p, layer_key(l, "wo"))));
    const auto f = ad::mul_row(ad::layer_norm_rows(h, kNormEps), leaf(p, layer_key(l, "ln2")));
    const auto hidden =
        ad::gelu(ad::add_row(ad::matmul(f, leaf(p, layer_key(l, "w1"))), leaf(p, layer_key(l, "b1"))));
    h = ad::add(h, ad::add_row(ad::matmul(hidden, leaf(p, layer_key(l, "w2"))),
                               leaf(p, layer_key(l, "b2"))));
  }
  return h;
}

Tensor attention_mask(std::size_t visual, std::size_t text) {
  const std::size_t n = visual + text;
  std::vector<double> m(n * n, kMasked);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const bool allowed = c < visual || (r >= visual && c <= r);
      if (allowed) m[r * n + c] = 0.0;
    }
  }
  return Tensor({n, n}, std::move(m));
}

// ---- plain-double helpers for incremental decoding --------------------------

void layer_norm_vec(const double* x, const double* gain, std::size_t n, double* out) {
  double mu = 0.0;
  for (std::size_t j = 0; j < n; ++j) mu += x[j];
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + kNormEps);
  for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mu) * inv * gain[j];
}

// out[n] = x[k] * W[k, n]
void vec_mat(const double* x, const Tensor& w, double* out) {
  const std::size_t k = w.dim(0), n = w.dim(1);
  const auto wd = w.data();
  std::fill(out, out + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double xv = x[p];
    if (xv == 0.0) continue;
    const double* row = wd.data() + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xv * row[j];
  }
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace

// ---- config & params ---------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab <= token::first_free) throw ValidationError("vocabulary too small for reserved ids");
  if (d_model < 2 || heads < 1 || d_model % heads != 0) {
    throw ValidationError("d_model must be a positive multiple of heads");
  }
  if (layers < 1 || ffn < 1) throw ValidationError("layers and ffn must be positive");
  if (patch < 1 || height % patch != 0 || width % patch != 0) {
    throw ValidationError("frame size must be divisible by the spatial patch size");
  }
  if (channels < 1) throw ValidationError("channels must be positive");
  if (context <= visual_tokens() + 1) throw ValidationError("context too small");
}

std::map<std::string, Shape> ModelParams::layout(const ModelConfig& c) {
  const std::size_t d = sz(c.d_model), f = sz(c.ffn), v = sz(c.vocab);
  std::map<std::string, Shape> out{
      {"patch_proj.w", {sz(c.patch_dim()), d}},
      {"patch_proj.b", {d}},
      {"vis_pos", {sz(c.visual_tokens()), d}},
      {"tok_emb", {v, d}},
      {"ln_f", {d}},
  };
  if (!c.tied) out["lm_head"] = {d, v};
  for (int l = 0; l < c.layers; ++l) {
    out[layer_key(l, "ln1")] = {d};
    out[layer_key(l, "wq")] = {d, d};
    out[layer_key(l, "wk")] = {d, d};
    out[layer_key(l, "wv")] = {d, d};
    out[layer_key(l, "wo")] = {d, d};
    out[layer_key(l, "ln2")] = {d};
    out[layer_key(l, "w1")] = {d, f};
    out[layer_key(l, "b1")] = {f};
    out[layer_key(l, "w2")] = {f, d};
    out[layer_key(l, "b2")] = {d};
  }
  return out;
}

ModelParams::ModelParams(ModelConfig config, std::map<std::string, Tensor> tensors)
    : config_(config), tensors_(std::move(tensors)) {
  config_.validate();
  const auto expected = layout(config_);
  if (expected.size() != tensors_.size()) {
    throw ValidationError("parameter set does not match the model configuration");
  }
  for (const auto& [name, shape] : expected) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValidationError("missing parameter " + name);
    if (it->second.shape() != shape) {
      throw ShapeError("parameter " + name + " has shape " + shape_to_string(it->second.shape()) +
                       ", expected " + shape_to_string(shape));
    }
    if (!it->second.all_finite()) throw NumericError("parameter " + name + " is not finite");
  }
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const double depth_scale = 1.0 / std::sqrt(2.0 * config.layers);
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, shape] : layout(config)) {
    Rng rng(mix_seed(seed, hash_name(name)));
    const bool is_gain = name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_f";
    const bool is_bias = name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2");
    double std_dev = 0.0;
    if (name == "tok_emb") {
      std_dev = 1.0;
    } else if (name == "vis_pos") {
      std_dev = 0.1;
    } else if (name == "patch_proj.w") {
      std_dev = 4.0 / std::sqrt(static_cast<double>(shape[0]));
    } else if (shape.size() == 2) {
      std_dev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      if (name.ends_with("wo") || name.ends_with("w2")) std_dev *= depth_scale;
    }
    std::vector<double> v(shape_size(shape), is_gain ? 1.0 : 0.0);
    if (!is_gain && !is_bias) {
      for (auto& x : v) x = std_dev * rng.normal();
    }
    tensors.emplace(name, Tensor(shape, std::move(v)));
  }
  return ModelParams(config, std::move(tensors));
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("missing parameter " + name);
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

bool ModelParams::bit_equal(const ModelParams& other) const {
  if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [name, t] : tensors_) {
    auto it = other.tensors_.find(name);
    if (it == other.tensors_.end() || !t.bit_equal(it->second)) return false;
  }
  return true;
}

void save_params(const std::filesystem::path& dir, const ModelParams& params) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest.txt", std::ios::trunc);
  if (!m) throw Error("cannot write checkpoint manifest in " + dir.string());
  const auto& c = params.config();
  m << "config vocab " << c.vocab << '\n'
    << "config d_model " << c.d_model << '\n'
    << "config layers " << c.layers << '\n'
    << "config heads " << c.heads << '\n'
    << "config ffn " << c.ffn << '\n'
    << "config patch " << c.patch << '\n'
    << "config height " << c.height << '\n'
    << "config width " << c.width << '\n'
    << "config channels " << c.channels << '\n'
    << "config context " << c.context << '\n'
    << "config tied " << (c.tied ? 1 : 0) << '\n';
  for (const auto& [name, t] : params.tensors()) {
    const std::string file = name + ".vdtn";
    save_tensor(dir / file, t);
    m << "param " << name << ' ' << file << '\n';
  }
}

ModelParams load_params(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw FormatError((dir / "manifest.txt").string() + ": missing file");
  ModelConfig c;
  std::map<std::string, Tensor> tensors;
  std::string line;
  int line_no = 0;
  while (std::getline(m, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind, key, value;
    if (!(is >> kind >> key >> value)) {
      throw FormatError("checkpoint manifest line " + std::to_string(line_no) + " is malformed");
    }
    if (kind == "param") {
      tensors.emplace(key, load_tensor(dir / value));
      continue;
    }
    if (kind != "config") {
      throw FormatError("checkpoint manifest line " + std::to_string(line_no) + ": unknown kind " + kind);
    }
    int v = 0;
    try {
      v = std::stoi(value);
    } catch (const std::exception&) {
      throw FormatError("checkpoint manifest: config " + key + " is not an integer");
    }
    if (key == "vocab") c.vocab = v;
    else if (key == "d_model") c.d_model = v;
    else if (key == "layers") c.layers = v;
    else if (key == "heads") c.heads = v;
    else if (key == "ffn") c.ffn = v;
    else if (key == "patch") c.patch = v;
    else if (key == "height") c.height = v;
    else if (key == "width") c.width = v;
    else if (key == "channels") c.channels = v;
    else if (key == "context") c.context = v;
    else if (key == "tied") c.tied = v != 0;
    else throw FormatError("checkpoint manifest: unknown config key " + key);
  }
  return ModelParams(c, std::move(tensors));
}

// ---- encoder -------------------------------------------------------------------

PatchLayout::PatchLayout(const ModelConfig& config)
    : patch_(sz(config.patch)),
      channels_(sz(config.channels)),
      grid_w_(sz(config.width / config.patch)),
      tokens_(sz(config.visual_tokens())),
      dim_(sz(config.patch_dim())) {}

std::size_t PatchLayout::token_of(std::size_t y, std::size_t x) const {
  return (y / patch_) * grid_w_ + x / patch_;
}

std::size_t PatchLayout::feature_of(std::size_t y, std::size_t x, std::size_t c) const {
  return ((y % patch_) * patch_ + x % patch_) * channels_ + c;
}

std::size_t PatchLayout::slot(std::size_t y, std::size_t x, std::size_t c) const {
  return token_of(y, x) * dim_ + feature_of(y, x, c);
}

Tensor pool_patches(const VideoTensor& video, const ModelConfig& config) {
  config.validate();
  if (video.height() != sz(config.height) || video.width() != sz(config.width) ||
      video.channels() != sz(config.channels)) {
    throw ShapeError("video shape " + shape_to_string(video.pixels().shape()) +
                     " does not match the model's frame configuration");
  }
  const PatchLayout layout(config);
  std::vector<double> pooled(layout.tokens() * layout.dim(), 0.0);
  const double inv_t = 1.0 / static_cast<double>(video.frames());
  for (std::size_t t = 0; t < video.frames(); ++t)
    for (std::size_t y = 0; y < video.height(); ++y)
      for (std::size_t x = 0; x < video.width(); ++x)
        for (std::size_t c = 0; c < video.channels(); ++c)
          pooled[layout.slot(y, x, c)] += video.at(t, y, x, c);
  for (auto& v : pooled) v *= inv_t;
  return Tensor({layout.tokens(), layout.dim()}, std::move(pooled));
}

ParamLeaves make_leaves(const ModelParams& params, bool trainable) {
  ParamLeaves out;
  for (const auto& [name, t] : params.tensors()) {
    out.emplace(name, trainable ? ad::variable(t) : ad::constant(t));
  }
  return out;
}

ad::Expr encode_video(const ParamLeaves& p, const ModelConfig& cfg, const ad::Expr& pooled) {
  if (pooled.shape() != Shape{sz(cfg.visual_tokens()), sz(cfg.patch_dim())}) {
    throw ShapeError("pooled patches have shape " + shape_to_string(pooled.shape()));
  }
  return ad::add(ad::add_row(ad::matmul(pooled, leaf(p, "patch_proj.w")), leaf(p, "patch_proj.b")),
                 leaf(p, "vis_pos"));
}

Tensor encode_video(const VideoTensor& video, const ModelParams& params) {
  const auto leaves = make_leaves(params, false);
  return encode_video(leaves, params.config(),
                      ad::constant(pool_patches(video, params.config())))
      .value();
}

ad::Expr forward_logits(const ParamLeaves& p, const ModelConfig& cfg, const ad::Expr& pooled,
                        std::span<const int> text) {
  if (text.empty() || text.front() != token::bos) {
    throw ValidationError("text prefix must begin with BOS");
  }
  const std::size_t n_vis = sz(cfg.visual_tokens());
  if (n_vis + text.size() > sz(cfg.context)) {
    throw ValidationError("context overflow: " + std::to_string(n_vis + text.size()) +
                          " positions exceed the limit of " + std::to_string(cfg.context));
  }
  const std::size_t d = sz(cfg.d_model);
  const auto vis = encode_video(p, cfg, pooled);
  const auto txt = ad::add(ad::embedding(leaf(p, "tok_emb"), text),
                           ad::constant(sinusoid_table(text.size(), d)));
  const std::vector<ad::Expr> rows{vis, txt};
  auto h = run_stack(p, cfg, ad::concat_rows(rows),
                     ad::constant(attention_mask(n_vis, text.size())), nullptr);
  h = ad::slice_rows(h, n_vis, n_vis + text.size());
  h = ad::mul_row(ad::layer_norm_rows(h, kNormEps), leaf(p, "ln_f"));
  if (cfg.tied) return ad::matmul_nt(h, leaf(p, "tok_emb"));
  return ad::matmul(h, leaf(p, "lm_head"));
}

Tensor forward_logits(const VideoTensor& video, std::span<const int> text,
                      const ModelParams& params) {
  const auto leaves = make_leaves(params, false);
  return forward_logits(leaves, params.config(),
                        ad::constant(pool_patches(video, params.config())), text)
      .value();
}

// ---- incremental decoding ---------------------------------------------------------

DecodeSession::DecodeSession(const ModelParams& params, const Tensor& pooled)
    : params_(&params), visual_(sz(params.config().visual_tokens())) {
  const auto& cfg = params.config();
  const auto leaves = make_leaves(params, false);
  LayerCache cache;
  run_stack(leaves, cfg, encode_video(leaves, cfg, ad::constant(pooled)),
            ad::constant(Tensor::zeros({visual_, visual_})), &cache);
  for (int l = 0; l < cfg.layers; ++l) {
    keys_.push_back(cache.keys[sz(l)].to_vector());
    values_.push_back(cache.values[sz(l)].to_vector());
  }
}

std::vector<double> DecodeSession::feed(int tok) {
  const auto& cfg = params_->config();
  const auto& P = *params_;
  if (tok < 0 || tok >= cfg.vocab) throw ValidationError("unknown token id " + std::to_string(tok));
  if (text_len_ == 0 && tok != token::bos) throw ValidationError("text must begin with BOS");
  if (visual_ + text_len_ + 1 > sz(cfg.context)) {
    throw ValidationError("context overflow at " + std::to_string(visual_ + text_len_ + 1) +
                          " positions");
  }
  const std::size_t d = sz(cfg.d_model), dh = d / sz(cfg.heads), f = sz(cfg.ffn);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> x(d), a(d), q(d), k(d), v(d), o(d), tmp(d), hid(f);
  const auto emb = P.at("tok_emb").data();
  sinusoid(text_len_, d, x.data());
  for (std::size_t j = 0; j < d; ++j) x[j] += emb[sz(tok) * d + j];

  for (int l = 0; l < cfg.layers; ++l) {
    layer_norm_vec(x.data(), P.at(layer_key(l, "ln1")).data().data(), d, a.data());
    vec_mat(a.data(), P.at(layer_key(l, "wq")), q.data());
    vec_mat(a.data(), P.at(layer_key(l, "wk")), k.data());
    vec_mat(a.data(), P.at(layer_key(l, "wv")), v.data());
    auto& keys = keys_[sz(l)];
    auto& vals = values_[sz(l)];
    keys.insert(keys.end(), k.begin(), k.end());
    vals.insert(vals.end(), v.begin(), v.end());
    const std::size_t n = keys.size() / d;
    std::vector<double> scores(n);
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const std::size_t b = sz(hd) * dh;
      double mx = -INFINITY;
      for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < dh; ++j) s += q[b + j] * keys[r * d + b + j];
        scores[r] = s * inv_sqrt;
        mx = std::max(mx, scores[r]);
      }
      double z = 0.0;
      for (auto& s : scores) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j < dh; ++j) o[b + j] = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        const double w = scores[r] / z;
        for (std::size_t j = 0; j < dh; ++j) o[b + j] += w * vals[r * d + b + j];
      }
    }
    vec_mat(o.data(), P.at(layer_key(l, "wo")), tmp.data());
    for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];
    layer_norm_vec(x.data(), P.at(layer_key(l, "ln2")).data().data(), d, a.data());
    vec_mat(a.data(), P.at(layer_key(l, "w1")), hid.data());
    const auto b1 = P.at(layer_key(l, "b1")).data();
    for (std::size_t j = 0; j < f; ++j) hid[j] = gelu_scalar(hid[j] + b1[j]);
    vec_mat(hid.data(), P.at(layer_key(l, "w2")), tmp.data());
    const auto b2 = P.at(layer_key(l, "b2")).data();
    for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j] + b2[j];
  }
  ++text_len_;
  layer_norm_vec(x.data(), P.at("ln_f").data().data(), d, a.data());
  std::vector<double> logits(sz(cfg.vocab));
  if (cfg.tied) {
    for (std::size_t t = 0; t < logits.size(); ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += a[j] * emb[t * d + j];
      logits[t] = s;
    }
  } else {
    vec_mat(a.data(), P.at("lm_head"), logits.data());
  }
  return logits;
}

// ---- generation ------------------------------------------------------------------

std::string to_string(StopReason r) { return r == StopReason::eos ? "eos" : "max_new_tokens"; }

double GenerationTrace::total_wall_s() const {
  double s = 0.0;
  for (double w : wall_s) s += w;
  return s;
}

std::string GenerationTrace::to_jsonl() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    nlohmann::json j = {{"step", i}, {"token", tokens[i]}, {"p_eos", p_eos(i)}, {"wall_s", wall_s[i]}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[sz(best)]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  temperature = std::max(temperature, 1e-6);
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp((logits[i] - mx) / temperature));
  for (auto& v : p) v /= z;
  return p;
}

GenerationTrace generate(const ModelParams& params, const Tensor& pooled,
                         std::span<const int> prompt, const DecodeConfig& cfg) {
  if (cfg.max_new_tokens < 1) throw ValidationError("max_new_tokens must be at least 1");
  if (!(cfg.temperature >= 0.0)) throw ValidationError("temperature must be non-negative");
  using clock = std::chrono::steady_clock;
  const bool greedy = cfg.temperature == 0.0;
  const double temp = std::max(cfg.temperature, 1e-6);
  Rng rng(cfg.seed);

  GenerationTrace trace;
  auto t0 = clock::now();
  DecodeSession session(params, pooled);
  std::vector<double> logits = session.feed(token::bos);
  for (int tok : prompt) logits = session.feed(tok);

  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    auto probs = softmax(logits);
    int next = 0;
    if (greedy) {
      next = argmax(logits);
    } else {
      const auto tempered = softmax(logits, temp);
      double u = rng.uniform(), acc = 0.0;
      next = static_cast<int>(tempered.size()) - 1;
      for (std::size_t i = 0; i < tempered.size(); ++i) {
        acc += tempered[i];
        if (u < acc) {
          next = static_cast<int>(i);
          break;
        }
      }
    }
    trace.tokens.push_back(next);
    trace.probs.push_back(std::move(probs));
    const bool done = next == token::eos;
    if (!done && step + 1 < cfg.max_new_tokens) logits = session.feed(next);
    const auto t1 = clock::now();
    trace.wall_s.push_back(std::chrono::duration<double>(t1 - t0).count());
    t0 = t1;
    if (done) {
      trace.reason = StopReason::eos;
      break;
    }
  }
  return trace;
}

GenerationTrace generate(const ModelParams& params, const VideoTensor& video,
                         std::span<const int> prompt, const DecodeConfig& cfg) {
  return generate(params, pool_patches(video, params.config()), prompt, cfg);
}

// ---- pretraining -------------------------------------------------------------------

double answer_accuracy(const ModelParams& params, const std::vector<VideoSample>& samples,
                       std::span<const int> prompt) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  std::size_t counted = 0;
  for (const auto& s : samples) {
    if (!s.moving) continue;
    ++counted;
    DecodeSession session(params, pool_patches(s.video, params.config()));
    std::vector<double> logits = session.feed(token::bos);
    for (int tok : prompt) logits = session.feed(tok);
    const bool says_yes = logits[token::yes] >= logits[token::no];
    if (says_yes == (s.label == Label::yes)) ++correct;
  }
  if (counted == 0) return 0.0;
  return static_cast<double>(correct) / static_cast<double>(counted);
}

std::vector<int> describe_target(const VideoSample& sample, int length) {
  // Moving clips use one of four groups by domain and direction; static
  // clips share a fifth.
  const int group = !sample.moving ? 4
                                   : 2 * (sample.domain == Domain::b ? 1 : 0) +
                                         (sample.label == Label::no ? 1 : 0);
  std::vector<int> out;
  for (int i = 0; i < length; ++i) out.push_back(token::first_free + 4 * group + i % 4);
  return out;
}

PretrainResult pretrain(const std::vector<VideoSample>& train,
                        const std::vector<VideoSample>& heldout, const ModelConfig& config,
                        const PretrainConfig& cfg) {
  if (train.empty()) throw ValidationError("pretraining set is empty");
  if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.lr > 0.0) || cfg.describe_length < 0 ||
      !(cfg.describe_weight >= 0.0)) {
    throw ValidationError("invalid pretraining configuration");
  }
  ModelParams params = ModelParams::init(config, cfg.seed);
  std::vector<Tensor> pooled;
  pooled.reserve(train.size());
  for (const auto& s : train) pooled.push_back(pool_patches(s.video, config));

  std::vector<std::string> names;
  std::vector<std::vector<double>> values, m1, m2;
  for (const auto& [name, t] : params.tensors()) {
    names.push_back(name);
    values.push_back(t.to_vector());
    m1.emplace_back(t.size(), 0.0);
    m2.emplace_back(t.size(), 0.0);
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long step = 0;

  Rng rng(mix_seed(cfg.seed, 0x5052455452ull));
  std::vector<std::size_t> order(train.size());
  PretrainResult result;
  const std::size_t answer_row = kDefaultPrompt.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += sz(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + sz(cfg.batch));
      std::vector<std::vector<double>> grad;
      for (const auto& v : values) grad.emplace_back(v.size(), 0.0);
      const auto leaves = make_leaves(params, true);
      std::vector<ad::Expr> wrt;
      for (const auto& n : names) wrt.push_back(leaves.at(n));
      for (std::size_t b = start; b < end; ++b) {
        const auto& sample = train[order[b]];
        const auto& video = pooled[order[b]];
        const auto sequence_loss = [&](const std::vector<int>& prompt,
                                       const std::vector<int>& targets) {
          std::vector<int> seq{token::bos};
          seq.insert(seq.end(), prompt.begin(), prompt.end());
          seq.insert(seq.end(), targets.begin(), targets.end() - 1);
          const auto logits = forward_logits(leaves, config, ad::constant(video), seq);
          const auto rows = ad::slice_rows(logits, answer_row, answer_row + targets.size());
          return ad::mean(ad::cross_entropy_rows(rows, targets));
        };
        if (!sample.moving && cfg.describe_length < 1) {
          throw ValidationError("static clips need a positive describe_length");
        }
        const std::vector<int> answer =
            !sample.moving ? describe_target(sample, cfg.describe_length)
                    : std::vector<int>{sample.label == Label::yes ? token::yes : token::no,
                                       token::eos};
        auto total = sequence_loss(kDefaultPrompt, answer);
        if (cfg.describe_length > 0) {
          total = ad::add(total, ad::scale(sequence_loss(kDescribePrompt,
                                                         describe_target(sample, cfg.describe_length)),
                                           cfg.describe_weight));
        }
        epoch_loss += total.value().item();
        const auto g = ad::gradient(total, wrt);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const auto gd = g[k].data();
          for (std::size_t j = 0; j < gd.size(); ++j) grad[k][j] += gd[j];
        }
      }
      ++step;
      const double inv_b = 1.0 / static_cast<double>(end - start);
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      std::map<std::string, Tensor> updated;
      for (std::size_t k = 0; k < names.size(); ++k) {
        for (std::size_t j = 0; j < values[k].size(); ++j) {
          const double g = grad[k][j] * inv_b;
          m1[k][j] = beta1 * m1[k][j] + (1 - beta1) * g;
          m2[k][j] = beta2 * m2[k][j] + (1 - beta2) * g * g;
          values[k][j] -= cfg.lr * (m1[k][j] / c1) / (std::sqrt(m2[k][j] / c2) + adam_eps);
        }
        updated.emplace(names[k], Tensor(params.at(names[k]).shape(), values[k]));
      }
      params = ModelParams(config, std::move(updated));
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    spdlog::debug("pretrain epoch {} loss {:.6f}", epoch, result.epoch_loss.back());
  }
  result.heldout_accuracy = answer_accuracy(params, heldout.empty() ? train : heldout);
  result.gate_passed = result.heldout_accuracy >= cfg.accuracy_gate;
  result.params = std::move(params);
  if (!result.gate_passed) {
    spdlog::warn("pretraining reached held-out accuracy {:.3f}, below the {:.2f} gate",
                 result.heldout_accuracy, cfg.accuracy_gate);
  }
  return result;
}

}  // namespace spongelab
