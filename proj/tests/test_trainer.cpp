#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "spongelab/error.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/trainer.hpp"

using namespace spongelab;
namespace fs = std::filesystem;

namespace {

const ModelParams& model() {
  static const ModelParams p = ModelParams::init(ModelConfig{}, 77);
  return p;
}

std::vector<VideoTensor> videos(int n, std::uint64_t seed) {
  std::vector<VideoTensor> out;
  for (const auto& s : gen_dataset(n, 0, seed, Domain::a).train) out.push_back(s.video);
  return out;
}

TrainConfig quick(int epochs = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch = 2;
  c.target_length = 16;
  c.horizon = 8;
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("sign-PGD step examples") {
  const auto rep = FeasibleSet::replacement();
  const Tensor half = Tensor::filled({4}, 0.5);
  const Tensor up = Tensor::filled({4}, 3.0);
  const auto stepped = sign_pgd_step(half, up, 0.01, rep);
  for (double v : stepped.data()) CHECK(v == doctest::Approx(0.49).epsilon(1e-15));
  CHECK(sign_pgd_step(half, Tensor::zeros({4}), 0.01, rep).to_vector() == half.to_vector());
  CHECK(sign_pgd_step(Tensor::filled({4}, 0.005), up, 0.01, rep)[0] == 0.0);

  const auto add = FeasibleSet::additive(0.05);
  CHECK(sign_pgd_step(Tensor::filled({1}, -0.045), Tensor::filled({1}, 3.0), 0.01, add)[0] == -0.05);

  CHECK_THROWS_AS(sign_pgd_step(half, Tensor::zeros({3}), 0.01, rep), ShapeError);
  CHECK_THROWS_AS(sign_pgd_step(half, Tensor::filled({4}, std::nan("")), 0.01, rep), NumericError);
}

TEST_CASE("zero epochs return the initial trigger") {
  const auto r = train_universal(videos(4, 1), model(), quick(0));
  CHECK(r.log.steps.empty());
  for (double v : r.trigger.patch.delta.data()) CHECK(v == 0.5);
  CHECK(r.trigger.patch.placement.row == 24);
  CHECK(r.trigger.patch.placement.col == 24);
}

TEST_CASE("universal training is deterministic and stays feasible") {
  const auto data = videos(6, 2);
  for (auto mode : {PerturbationMode::replacement, PerturbationMode::additive}) {
    auto cfg = quick(2);
    cfg.mode = mode;
    cfg.seed = 13;
    const auto set = cfg.feasible();
    int observed = 0;
    const auto a = train_universal(data, model(), cfg, [&](const TrainStep& s, const Tensor& v) {
      ++observed;
      CHECK(std::isfinite(s.total));
      for (double x : v.data()) {
        CHECK(x >= set.lower());
        CHECK(x <= set.upper());
      }
    });
    const auto b = train_universal(data, model(), cfg);
    CHECK(bit_equal(a.trigger.values(), b.trigger.values()));
    CHECK(observed == 6);  // 2 epochs of 3 minibatches
    CHECK(a.log.steps.size() == 6);
    CHECK(a.log.epoch_wall_s.size() == 2);
    for (std::size_t i = 0; i < a.log.steps.size(); ++i) CHECK(a.log.steps[i].step == static_cast<int>(i));
  }
}

TEST_CASE("different seeds shuffle differently") {
  const auto data = videos(6, 2);
  auto cfg = quick(1);
  cfg.batch = 1;
  cfg.seed = 1;
  const auto a = train_universal(data, model(), cfg);
  cfg.seed = 2;
  const auto b = train_universal(data, model(), cfg);
  CHECK_FALSE(bit_equal(a.trigger.values(), b.trigger.values()));
}

TEST_CASE("a small sign step rarely increases the loss") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const auto data = videos(20, 5);
  auto cfg = quick();
  cfg.alpha = 1e-5;
  int non_increase = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<double> x(8 * 8 * 3);
    for (auto& v : x) v = u(rng);
    const Tensor values({8, 8, 3}, x);
    const auto before = trigger_loss_grad(model(), data[static_cast<std::size_t>(trial)], values, cfg, 24, 24);
    const auto next = sign_pgd_step(values, before.grad, cfg.alpha, cfg.feasible());
    const auto after = trigger_loss_grad(model(), data[static_cast<std::size_t>(trial)], next, cfg, 24, 24);
    non_increase += after.terms.total <= before.terms.total;
  }
  CHECK(non_increase >= 18);
}

TEST_CASE("instance optimization") {
  const auto video = videos(2, 6)[0];
  auto cfg = quick();
  cfg.instance_steps = 0;
  const auto none = train_instance(video, model(), cfg);
  CHECK(none.adversarial.pixels().to_vector() == video.pixels().to_vector());

  cfg.instance_steps = 3;
  cfg.mode = PerturbationMode::additive;
  int steps = 0;
  const auto r = train_instance(video, model(), cfg, [&](const TrainStep&, const Tensor& v) {
    ++steps;
    for (double x : v.data()) CHECK(std::abs(x) <= cfg.epsilon);
  });
  CHECK(steps == 3);
  for (std::size_t i = 0; i < video.pixels().size(); ++i) {
    CHECK(std::abs(r.adversarial.pixels()[i] - video.pixels()[i]) <= cfg.epsilon + 1e-15);
  }
}

TEST_CASE("trigger files round trip") {
  const auto dir = fs::temp_directory_path();
  Trigger patch = initial_trigger(quick(), 32, 32, 3);
  auto delta = patch.patch.delta.to_vector();
  delta[3] = 0.125;
  patch.patch.delta = Tensor(patch.patch.delta.shape(), delta);
  save_trigger(dir / "spongelab_t.vdpc", patch);
  const auto lp = load_trigger(dir / "spongelab_t.vdpc");
  CHECK(lp.mode == PerturbationMode::replacement);
  CHECK(bit_equal(lp.patch.delta, patch.patch.delta));

  auto cfg = quick();
  cfg.mode = PerturbationMode::additive;
  Trigger noise = initial_trigger(cfg, 32, 32, 3);
  auto values = noise.noise.to_vector();
  values[7] = -0.03125;
  noise.noise = Tensor(noise.noise.shape(), values);
  save_trigger(dir / "spongelab_t.vdtn", noise);
  const auto ln = load_trigger(dir / "spongelab_t.vdtn", 0.05);
  CHECK(ln.mode == PerturbationMode::additive);
  CHECK(bit_equal(ln.noise, noise.noise));
  fs::remove(dir / "spongelab_t.vdpc");
  fs::remove(dir / "spongelab_t.vdtn");
}

TEST_CASE("config parsing") {
  const auto c = parse_train_config(R"(
    # comment line
    alpha = 0.02
    epochs = 5   # trailing comment
    mode = additive
    placement = random
    epsilon = 0.03
    victim = /tmp/v
  )");
  CHECK(c.alpha == 0.02);
  CHECK(c.epochs == 5);
  CHECK(c.mode == PerturbationMode::additive);
  CHECK(c.placement == Placement::Policy::random);
  CHECK(c.epsilon == 0.03);
  CHECK(c.victim == "/tmp/v");

  CHECK_THROWS_AS(parse_train_config("alhpa = 0.1"), ValidationError);
  CHECK_THROWS_AS(parse_train_config("alpha"), ValidationError);
  CHECK_THROWS_AS(parse_train_config("alpha = fast"), ValidationError);
  CHECK_THROWS_AS(parse_train_config("alpha = -1"), ValidationError);
  CHECK_THROWS_AS(parse_train_config("batch = 0"), ValidationError);
  CHECK_THROWS_AS(parse_train_config("mode = sticker"), ValidationError);
  CHECK_THROWS_AS(parse_train_config("mode = additive\nepsilon = 0"), ValidationError);
  CHECK_THROWS_AS(load_train_config("/nonexistent/viddos.cfg"), ValidationError);
}
