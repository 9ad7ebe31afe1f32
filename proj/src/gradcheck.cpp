#include "spongelab/gradcheck.hpp"

#include <chrono>
#include <functional>

#include <nlohmann/json.hpp>

#include "spongelab/autodiff.hpp"
#include "spongelab/error.hpp"
#include "spongelab/rng.hpp"

namespace spongelab {

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

using Op = std::function<ad::Expr(const ad::Expr&)>;

GradcheckEntry check_op(const std::string& name, const Op& op, const Tensor& x, Rng& rng,
                        double step, double tolerance) {
  const Tensor probe = op(ad::constant(x)).value();
  const Tensor w = random_tensor(probe.shape(), rng);
  auto loss_of = [&](const ad::Expr& in) { return ad::sum(ad::mul(op(in), ad::constant(w))); };
  const ad::Expr xv = ad::variable(x);
  const Tensor analytic = ad::gradient(loss_of(xv), xv);
  const Tensor numeric = ad::finite_difference_gradient(
      [&](const Tensor& t) { return loss_of(ad::constant(t)).value().item(); }, x, step);
  GradcheckEntry e;
  e.name = name;
  e.coordinates = x.size();
  e.max_rel_error = ad::max_relative_error(analytic, numeric, kGradFloor);
  e.passed = e.max_rel_error <= tolerance;
  return e;
}

}  // namespace

void GradcheckReport::add(GradcheckEntry entry) {
  max_rel_error = std::max(max_rel_error, entry.max_rel_error);
  passed = passed && entry.passed;
  entries.push_back(std::move(entry));
}

std::string GradcheckReport::to_json() const {
  nlohmann::ordered_json checks = nlohmann::json::array();
  for (const auto& e : entries) {
    checks.push_back({{"name", e.name},
                      {"coordinates", e.coordinates},
                      {"max_rel_error", e.max_rel_error},
                      {"passed", e.passed}});
  }
  nlohmann::ordered_json j{{"step", step},
                           {"tolerance", tolerance},
                           {"max_rel_error", max_rel_error},
                           {"passed", passed},
                           {"wall_s", wall_s},
                           {"checks", checks}};
  return j.dump();
}

GradcheckReport primitive_gradcheck(std::uint64_t seed, double step, double tolerance) {
  if (!(step > 0.0)) throw ValidationError("finite-difference step must be positive");
  Rng rng(mix_seed(seed, hash_name("primitives")));
  GradcheckReport r;
  r.step = step;
  r.tolerance = tolerance;
  const Tensor x34 = random_tensor({3, 4}, rng);
  const Tensor b45 = random_tensor({4, 5}, rng);
  const Tensor b54 = random_tensor({5, 4}, rng);
  const Tensor other = random_tensor({3, 4}, rng);
  const Tensor row4 = random_tensor({4}, rng);
  const Tensor positive = random_tensor({3, 4}, rng, 0.5, 2.0);
  const auto c = [](const Tensor& t) { return ad::constant(t); };
  const auto add = [&](const std::string& name, const Op& op, const Tensor& x) {
    r.add(check_op(name, op, x, rng, step, tolerance));
  };

  add("matmul", [&](const ad::Expr& x) { return ad::matmul(x, c(b45)); }, x34);
  add("matmul_rhs", [&](const ad::Expr& b) { return ad::matmul(c(x34), b); }, b45);
  add("matmul_nt", [&](const ad::Expr& x) { return ad::matmul_nt(x, c(b54)); }, x34);
  add("add", [&](const ad::Expr& x) { return ad::add(x, c(other)); }, x34);
  add("add_row", [&](const ad::Expr& v) { return ad::add_row(c(x34), v); }, row4);
  add("mul", [&](const ad::Expr& x) { return ad::mul(x, x); }, x34);
  add("mul_row", [&](const ad::Expr& v) { return ad::mul_row(c(x34), v); }, row4);
  add("scale", [](const ad::Expr& x) { return ad::affine(x, -2.5, 0.75); }, x34);
  add("embedding",
      [](const ad::Expr& table) {
        const std::vector<int> ids{2, 0, 2};
        return ad::embedding(table, ids);
      },
      x34);
  add("softmax", [](const ad::Expr& x) { return ad::softmax_rows(ad::scale(x, 3.0)); }, x34);
  add("layer_norm", [](const ad::Expr& x) { return ad::layer_norm_rows(x); }, x34);
  add("gelu", [](const ad::Expr& x) { return ad::gelu(ad::scale(x, 2.0)); }, x34);
  add("cross_entropy",
      [](const ad::Expr& z) {
        const std::vector<int> targets{1, 3, 0};
        return ad::cross_entropy_rows(z, targets);
      },
      x34);
  add("sum", [](const ad::Expr& x) { return ad::sum(x); }, x34);
  add("mean", [](const ad::Expr& x) { return ad::mean(x); }, x34);
  add("log", [](const ad::Expr& x) { return ad::log(x); }, positive);
  add("slice_concat",
      [](const ad::Expr& x) {
        const std::vector<ad::Expr> parts{ad::slice_cols(x, 2, 4), ad::slice_rows(x, 0, 3)};
        return ad::concat_cols(parts);
      },
      x34);
  add("gather",
      [](const ad::Expr& x) {
        const std::vector<std::size_t> idx{0, 5, 5, 11};
        return ad::gather(x, idx, {2, 2});
      },
      x34);
  add("linear_map",
      [](const ad::Expr& x) {
        const std::vector<ad::MapEntry> entries{{0, 1, 0.5}, {0, 2, -1.0}, {3, 7, 2.0}};
        return ad::linear_map(x, {4}, entries);
      },
      x34);
  return r;
}

GradcheckEntry trigger_gradcheck(const ModelParams& victim, const VideoTensor& video,
                                 const TrainConfig& cfg, std::uint64_t seed, double step,
                                 double tolerance) {
  cfg.validate();
  const auto trigger = initial_trigger(cfg, static_cast<int>(video.height()),
                                       static_cast<int>(video.width()),
                                       static_cast<int>(video.channels()));
  const auto placement = cfg.placement_for(static_cast<int>(video.height()),
                                           static_cast<int>(video.width()));
  const FeasibleSet set = cfg.feasible();
  Rng rng(mix_seed(seed, hash_name("trigger-point")));
  // Stay clear of the box edges so the additive clamp is inactive at every probe.
  const double lo = set.mode == PerturbationMode::replacement ? 0.1 : -0.5 * set.epsilon;
  const double hi = set.mode == PerturbationMode::replacement ? 0.9 : 0.5 * set.epsilon;
  const Tensor x = random_tensor(trigger.values().shape(), rng, lo, hi);
  const auto eval = [&](const Tensor& values) {
    return trigger_loss_grad(victim, video, values, cfg, placement.row, placement.col);
  };
  const Tensor analytic = eval(x).grad;
  const Tensor numeric = ad::finite_difference_gradient(
      [&](const Tensor& t) { return eval(t).terms.total; }, x, step);
  GradcheckEntry e;
  e.name = "joint_loss_" + to_string(cfg.mode);
  e.coordinates = x.size();
  e.max_rel_error = ad::max_relative_error(analytic, numeric, kGradFloor);
  e.passed = e.max_rel_error <= tolerance;
  return e;
}

GradcheckReport run_gradcheck(std::uint64_t seed, double step, double tolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport r = primitive_gradcheck(seed, step, tolerance);
  const auto victim = ModelParams::init(ModelConfig{}, mix_seed(seed, hash_name("model")));
  const auto video = gen_video(mix_seed(seed, hash_name("video")), Label::yes, Domain::a).video;
  TrainConfig cfg;
  cfg.seed = seed;
  r.add(trigger_gradcheck(victim, video, cfg, seed, step, tolerance));
  r.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace spongelab
