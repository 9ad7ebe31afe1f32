#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "spongelab/error.hpp"
#include "spongelab/gradcheck.hpp"
#include "spongelab/objectives.hpp"
#include "spongelab/perturbation.hpp"
#include "spongelab/synthetic.hpp"

using namespace spongelab;
namespace ad = spongelab::ad;

namespace {

constexpr int V = 32;

SpongeTarget small_target(int length = 8, int horizon = 2) {
  return SpongeTarget::cycle(length, 4, horizon, 3.0);
}

std::size_t rows_of(const SpongeTarget& t) { return t.teacher_input().size(); }

// Mutable logits buffer that converts to a (rows, V) tensor.
struct Logits {
  std::size_t rows;
  std::vector<double> v;
  double& operator[](std::size_t i) { return v[i]; }
  operator Tensor() const { return Tensor({rows, V}, v); }
};

Logits uniform_logits(std::size_t rows) { return {rows, std::vector<double>(rows * V, 0.0)}; }

// Sets row `r` of `logits` so its softmax puts `p[id]` on the listed ids and
// spreads the remainder evenly over the others.
void set_row(Logits& logits, std::size_t r, const std::vector<std::pair<int, double>>& p) {
  double used = 0.0;
  for (auto [id, prob] : p) used += prob;
  const double rest = (1.0 - used) / static_cast<double>(V - static_cast<int>(p.size()));
  for (int v = 0; v < V; ++v) logits[r * V + static_cast<std::size_t>(v)] = std::log(rest);
  for (auto [id, prob] : p) {
    logits[r * V + static_cast<std::size_t>(id)] =
        prob > 0.0 ? std::log(prob) : -1e4;  // exp underflows to exactly 0
  }
}

double value(const ad::Expr& e) { return e.value().item(); }

const ModelParams& tiny_model() {
  static const ModelParams p = ModelParams::init(ModelConfig{}, 2024);
  return p;
}

}  // namespace

TEST_CASE("teacher forcing on uniform logits equals ln V") {
  for (int horizon : {1, 4, 8}) {
    const auto t = small_target(8, horizon);
    const double l = value(masked_tf_from_logits(ad::constant(uniform_logits(rows_of(t))), t));
    CHECK(l == doctest::Approx(std::log(32.0)).epsilon(1e-12));
  }
}

TEST_CASE("teacher forcing is zero on a perfect model") {
  const auto t = small_target();
  Logits logits = uniform_logits(rows_of(t));
  const int lp = t.prompt_boundary();
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    const std::size_t r = static_cast<std::size_t>(lp - 1) + i;
    for (int v = 0; v < V; ++v) logits[r * V + static_cast<std::size_t>(v)] = -1e4;
    logits[r * V + static_cast<std::size_t>(t.tokens[i])] = 0.0;
  }
  CHECK(value(masked_tf_from_logits(ad::constant(logits), t)) == doctest::Approx(0.0));
}

TEST_CASE("refusal penalty values") {
  const auto t = small_target();
  const std::size_t first = static_cast<std::size_t>(t.prompt_boundary() - 1);
  CHECK(value(ban_from_logits(ad::constant(uniform_logits(rows_of(t))), t, BanSet{})) ==
        doctest::Approx(3.0 / 32.0).epsilon(1e-12));

  Logits logits = uniform_logits(rows_of(t));
  set_row(logits, first, {{token::yes, 0.3}, {token::no, 0.2}, {token::eos, 0.1}});
  CHECK(value(ban_from_logits(ad::constant(logits), t, BanSet{})) ==
        doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("termination suppression values") {
  const std::size_t first = static_cast<std::size_t>(small_target().prompt_boundary() - 1);
  SUBCASE("p(EOS) = 0.5 everywhere gives ln 2") {
    const auto t = small_target(8, 4);
    Logits logits = uniform_logits(rows_of(t));
    for (std::size_t k = 0; k < 4; ++k) set_row(logits, first + k, {{token::eos, 0.5}});
    CHECK(value(stop_from_logits(ad::constant(logits), t)) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("hand arithmetic with K = 2") {
    const auto t = small_target(8, 2);
    Logits logits = uniform_logits(rows_of(t));
    set_row(logits, first, {{token::eos, 0.1}});
    set_row(logits, first + 1, {{token::eos, 0.2}});
    CHECK(value(stop_from_logits(ad::constant(logits), t)) ==
          doctest::Approx(0.164252).epsilon(1e-6));
  }
  SUBCASE("no EOS mass gives zero") {
    const auto t = small_target(8, 3);
    Logits logits = uniform_logits(rows_of(t));
    for (std::size_t k = 0; k < 3; ++k) set_row(logits, first + k, {{token::eos, 0.0}});
    CHECK(value(stop_from_logits(ad::constant(logits), t)) == 0.0);
  }
  SUBCASE("certain EOS is reported") {
    const auto t = small_target(8, 2);
    Logits logits{rows_of(t), std::vector<double>(rows_of(t) * V, -1e4)};
    for (std::size_t r = 0; r < rows_of(t); ++r) logits[r * V + token::eos] = 0.0;
    CHECK_THROWS_AS(stop_from_logits(ad::constant(logits), t), NumericError);
  }
}

TEST_CASE("joint loss combines the terms") {
  const auto t = small_target(8, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  Logits logits = uniform_logits(rows_of(t));
  for (auto& x : logits.v) x = n(rng);
  const auto z = ad::constant(logits);

  const auto none = joint_from_logits(z, t, BanSet{}, LossWeights{0.0, 0.0});
  CHECK(none.total_value() == none.tf_value());

  const auto terms = joint_from_logits(z, t, BanSet{}, LossWeights{0.7, 1.9});
  CHECK(terms.total_value() ==
        doctest::Approx(terms.tf_value() + 0.7 * terms.ban_value() + 1.9 * terms.stop_value())
            .epsilon(1e-14));
  CHECK(terms.tf_value() >= 0.0);
  CHECK(terms.stop_value() >= 0.0);
  CHECK(terms.ban_value() >= 0.0);
  CHECK(terms.ban_value() <= 1.0);
}

TEST_CASE("weighted cross-entropy matches a hand computation") {
  const auto t = small_target(12, 5);
  const auto video = gen_video(8, Label::yes, Domain::a).video;
  const auto input = t.teacher_input();
  const Tensor logits = forward_logits(video, input, tiny_model());
  const auto w = t.weights();

  double num = 0.0, den = 0.0;
  const std::size_t lp = static_cast<std::size_t>(t.prompt_boundary());
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    const std::size_t r = lp - 1 + i;
    double mx = -1e300;
    for (int v = 0; v < V; ++v) mx = std::max(mx, logits[r * V + static_cast<std::size_t>(v)]);
    double z = 0.0;
    for (int v = 0; v < V; ++v) z += std::exp(logits[r * V + static_cast<std::size_t>(v)] - mx);
    const double ce =
        -(logits[r * V + static_cast<std::size_t>(t.tokens[i])] - mx - std::log(z));
    num += w[i] * ce;
    den += w[i];
  }
  CHECK(value(masked_tf_loss(video, t, tiny_model())) == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("prompt rows do not affect teacher forcing") {
  const auto t = small_target(8, 2);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Logits logits = uniform_logits(rows_of(t));
  for (auto& x : logits.v) x = n(rng);
  const double before = value(masked_tf_from_logits(ad::constant(logits), t));
  const std::size_t masked_rows = static_cast<std::size_t>(t.prompt_boundary() - 1);
  for (std::size_t i = 0; i < masked_rows * V; ++i) logits[i] += 10.0 * n(rng);
  CHECK(value(masked_tf_from_logits(ad::constant(logits), t)) == before);
}

TEST_CASE("a common weight scale leaves teacher forcing unchanged") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  auto t = small_target(8, 8);
  Logits logits = uniform_logits(rows_of(t));
  for (auto& x : logits.v) x = n(rng);
  t.head_weight = 2.0;
  const double a = value(masked_tf_from_logits(ad::constant(logits), t));
  t.head_weight = 7.5;
  const double b = value(masked_tf_from_logits(ad::constant(logits), t));
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
}

TEST_CASE("the joint gradient is the weighted sum of term gradients") {
  const auto video = gen_video(12, Label::no, Domain::a).video;
  const auto t = SpongeTarget::cycle();
  const auto& mc = tiny_model().config();
  const auto leaves = make_leaves(tiny_model(), false);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> init(8 * 8 * 3);
  for (auto& x : init) x = u(rng);
  const auto delta = ad::variable(Tensor({8, 8, 3}, init));
  const auto pooled = pooled_with_patch(video, mc, delta, 24, 24);
  const LossWeights lw{0.6, 1.7};
  const auto terms = attack_losses(leaves, mc, pooled, t, BanSet{}, lw);
  const Tensor g = ad::gradient(terms.total, delta);
  const Tensor g_tf = ad::gradient(terms.tf, delta);
  const Tensor g_ban = ad::gradient(terms.ban, delta);
  const Tensor g_stop = ad::gradient(terms.stop, delta);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(std::abs(g[i] - (g_tf[i] + lw.ban * g_ban[i] + lw.stop * g_stop[i])) <= 1e-12);
  }
}

TEST_CASE("joint loss gradient on a 4x4 patch matches finite differences") {
  TrainConfig cfg;
  cfg.patch_h = cfg.patch_w = 4;
  const auto video = gen_video(31, Label::yes, Domain::a).video;
  const auto e = trigger_gradcheck(tiny_model(), video, cfg, 3);
  CHECK(e.coordinates == 48);
  CHECK(e.max_rel_error <= 1e-4);
}

TEST_CASE("additive-noise gradient matches finite differences") {
  TrainConfig cfg;
  cfg.mode = PerturbationMode::additive;
  ModelConfig small;
  small.height = small.width = 16;
  const auto model = ModelParams::init(small, 8);
  SyntheticConfig sc;
  sc.height = sc.width = 16;
  sc.object_size = 4;
  sc.travel = 8;
  const auto video = gen_video(2, Label::no, Domain::b, sc).video;
  const auto e = trigger_gradcheck(model, video, cfg, 4);
  CHECK(e.max_rel_error <= 1e-4);
}

TEST_CASE("target and weight validation") {
  auto t = small_target();
  CHECK_NOTHROW(t.validate(V));
  t.horizon = 9;
  CHECK_THROWS_AS(t.validate(V), ValidationError);
  t = small_target();
  t.head_weight = 1.0;
  CHECK_THROWS_AS(t.validate(V), ValidationError);
  t = small_target();
  t.tokens.push_back(token::eos);
  CHECK_THROWS_AS(t.validate(V), ValidationError);
  t.tokens.clear();
  CHECK_THROWS_AS(t.validate(V), ValidationError);
  CHECK_THROWS_AS(LossWeights({-1.0, 1.0}).validate(), ValidationError);
  CHECK_THROWS_AS(BanSet{{}}.validate(V), ValidationError);
  CHECK_THROWS_AS(BanSet{{40}}.validate(V), ValidationError);
}

TEST_CASE("the library gradient suite passes") {
  const auto report = primitive_gradcheck(7);
  CHECK(report.passed);
  CHECK(report.max_rel_error <= 1e-4);
  CHECK(report.entries.size() >= 15);
}
