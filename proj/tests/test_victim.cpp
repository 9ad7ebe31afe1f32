// Properties of the pretrained victim. Needs SPONGELAB_VICTIM pointing at a checkpoint.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>

#include "spongelab/objectives.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/trainer.hpp"

using namespace spongelab;

namespace {

const ModelParams& victim() {
  static const ModelParams p = [] {
    const char* dir = std::getenv("SPONGELAB_VICTIM");
    REQUIRE_MESSAGE(dir != nullptr, "SPONGELAB_VICTIM is not set");
    return load_params(dir);
  }();
  return p;
}

const DatasetSplit& data() {
  static const DatasetSplit d = gen_dataset(32, 16, 1234, Domain::a);
  return d;
}

}  // namespace

TEST_CASE("clean answers are one word then EOS") {
  int exact = 0;
  for (const auto& s : data().heldout) {
    const auto g = generate(victim(), s.video, kDefaultPrompt, {});
    const int answer = s.label == Label::yes ? token::yes : token::no;
    exact += g.tokens == std::vector<int>{answer, token::eos};
  }
  CHECK(exact >= 15);  // at least 95% of 16
}

TEST_CASE("first-step argmax is a yes/no answer") {
  for (const auto& s : data().heldout) {
    const auto g = generate(victim(), s.video, kDefaultPrompt, DecodeConfig{0.0, 1, 0});
    const int first = g.tokens.front();
    CHECK((first == token::yes || first == token::no));
  }
}

TEST_CASE("refusal mass is high on clean video") {
  for (const auto& s : data().heldout) {
    CHECK(ban_loss(s.video, BanSet{}, victim()).value().item() >= 0.9);
  }
}

TEST_CASE("instance optimization is at least as strong as a universal patch") {
  TrainConfig cfg;
  cfg.epochs = 10;
  std::vector<VideoTensor> surrogate;
  for (const auto& s : data().train) surrogate.push_back(s.video);
  const auto universal = train_universal(surrogate, victim(), cfg);
  int wins = 0;
  for (const auto& s : data().heldout) {
    const auto inst = train_instance(s.video, victim(), cfg);
    const double u = trigger_loss(victim(), s.video, universal.trigger, cfg);
    wins += inst.final_loss <= u;
  }
  MESSAGE("instance loss <= universal loss on " << wins << " of 16 videos");
  CHECK(wins >= 12);  // 70% of 16, rounded up
}
