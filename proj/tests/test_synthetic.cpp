#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "spongelab/error.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/tensor_io.hpp"

using namespace spongelab;
namespace fs = std::filesystem;

namespace {

// Mean column (domain A) or row (domain B) of the bright/dark object in frame t.
double object_center(const VideoSample& s, std::size_t t) {
  const auto& v = s.video;
  double sum = 0.0, count = 0.0;
  for (std::size_t y = 0; y < v.height(); ++y) {
    for (std::size_t x = 0; x < v.width(); ++x) {
      const double g = v.at(t, y, x, 1);
      const bool object = s.domain == Domain::a ? g > 0.5 : g < 0.7;
      if (!object) continue;
      sum += static_cast<double>(s.domain == Domain::a ? x : y);
      count += 1.0;
    }
  }
  REQUIRE(count > 0.0);
  return sum / count;
}

bool same_pixels(const VideoTensor& a, const VideoTensor& b) {
  return a.pixels().shape() == b.pixels().shape() && a.pixels().to_vector() == b.pixels().to_vector();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generation is deterministic and in range") {
  for (Domain d : {Domain::a, Domain::b}) {
    const auto a = gen_video(17, Label::yes, d);
    const auto b = gen_video(17, Label::yes, d);
    CHECK(same_pixels(a.video, b.video));
    CHECK(a.video.pixels().shape() == Shape{8, 32, 32, 3});
    for (double v : a.video.pixels().data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK_FALSE(same_pixels(a.video, gen_video(18, Label::yes, d).video));
  }
}

TEST_CASE("motion direction follows the label") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (Domain d : {Domain::a, Domain::b}) {
      const auto yes = gen_video(seed, Label::yes, d);
      const auto no = gen_video(seed, Label::no, d);
      CHECK(object_center(yes, 7) > object_center(yes, 0));
      CHECK(object_center(no, 7) < object_center(no, 0));
    }
  }
}

TEST_CASE("static clips do not move") {
  const auto s = gen_static_video(5, Domain::a);
  CHECK_FALSE(s.moving);
  CHECK(object_center(s, 0) == object_center(s, 7));
}

TEST_CASE("datasets are balanced with disjoint seeds") {
  const auto split = gen_dataset(10, 7, 3, Domain::a);
  CHECK(split.train.size() == 10);
  CHECK(split.heldout.size() == 7);
  int yes = 0;
  for (const auto& s : split.train) yes += s.label == Label::yes;
  CHECK(yes == 5);
  int held_yes = 0;
  for (const auto& s : split.heldout) held_yes += s.label == Label::yes;
  CHECK(std::abs(2 * held_yes - 7) <= 1);

  std::set<std::uint64_t> train_seeds;
  for (const auto& s : split.train) train_seeds.insert(s.seed);
  for (const auto& s : split.heldout) CHECK_FALSE(train_seeds.contains(s.seed));
  std::set<int> ids;
  for (const auto& s : split.train) ids.insert(s.id);
  for (const auto& s : split.heldout) ids.insert(s.id);
  CHECK(ids.size() == 17);

  CHECK_THROWS_AS(gen_dataset(1, 2, 3, Domain::a), ValidationError);
}

TEST_CASE("regenerating from a stored seed reproduces the pixels") {
  const auto split = gen_dataset(4, 2, 8, Domain::b);
  for (const auto& s : split.heldout) {
    CHECK(same_pixels(gen_video(s.seed, s.label, s.domain, {}, s.id).video, s.video));
  }
}

TEST_CASE("a 512-clip surrogate set generates within ten seconds") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto split = gen_dataset(512, 0, 99, Domain::a);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(split.train.size() == 512);
  CHECK(secs < 10.0);
}

TEST_CASE("pretraining corpus ids are unique") {
  const auto corpus = gen_pretrain_corpus(8, 2, 4, 11, {}, 2);
  std::set<int> ids;
  for (const auto& s : corpus.train) ids.insert(s.id);
  for (const auto& s : corpus.heldout) ids.insert(s.id);
  CHECK(ids.size() == corpus.train.size() + corpus.heldout.size());
  CHECK(corpus.train.size() == 8 * 2 + 2 * 2 + 2 * 2 * 8);
}

TEST_CASE("stream windows take the majority clip label") {
  const auto windows = gen_window_samples(2, 8, 8, 4, Domain::a);
  CHECK(windows.size() == 16);
  for (const auto& w : windows) {
    CHECK(w.video.frames() == 8);
    CHECK(w.moving);
  }
  const auto again = gen_window_samples(2, 8, 8, 4, Domain::a);
  CHECK(same_pixels(windows[5].video, again[5].video));
}

TEST_CASE("streams concatenate clips") {
  const auto s = gen_stream(20, 3, Domain::a);
  CHECK(s.frames() == 20);
  CHECK_THROWS_AS(gen_stream(0, 3, Domain::a), ValidationError);
}

TEST_CASE("dataset round trip is bit exact") {
  const auto dir = fresh_dir("spongelab_ds_roundtrip");
  auto samples = gen_dataset(4, 2, 5, Domain::a).train;
  samples.push_back(gen_static_video(3, Domain::a, {}, 50));
  save_dataset(dir, samples);
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(loaded[i].seed == samples[i].seed);
    CHECK(loaded[i].label == samples[i].label);
    CHECK(loaded[i].domain == samples[i].domain);
    CHECK(loaded[i].moving == samples[i].moving);
    CHECK(same_pixels(loaded[i].video, samples[i].video));
  }
  fs::remove_all(dir);
}

TEST_CASE("corrupted datasets fail loudly") {
  const auto dir = fresh_dir("spongelab_ds_corrupt");
  save_dataset(dir, gen_dataset(2, 0, 5, Domain::a).train);

  SUBCASE("bad magic names the file") {
    const auto file = dir / "video_0.vdtn";
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    try {
      load_dataset(dir);
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("video_0.vdtn") != std::string::npos);
    }
  }
  SUBCASE("manifest count mismatch") {
    std::ofstream m(dir / "manifest.jsonl", std::ios::app);
    m << "\n";
    m.close();
    std::ofstream meta(dir / "dataset.json", std::ios::trunc);
    meta << R"({"count": 3, "frames": 8, "height": 32, "width": 32, "channels": 3})";
    meta.close();
    CHECK_THROWS_AS(load_dataset(dir), FormatError);
  }
  SUBCASE("missing video file") {
    fs::remove(dir / "video_1.vdtn");
    CHECK_THROWS_AS(load_dataset(dir), FormatError);
  }
  SUBCASE("shape mismatch") {
    save_tensor(dir / "video_1.vdtn", Tensor::zeros({8, 16, 32, 3}));
    CHECK_THROWS_AS(load_dataset(dir), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("label and domain parsing") {
  CHECK(parse_label("YES") == Label::yes);
  CHECK(parse_domain("B") == Domain::b);
  CHECK_THROWS_AS(parse_label("maybe"), ValidationError);
  CHECK_THROWS_AS(parse_domain("C"), ValidationError);
}
