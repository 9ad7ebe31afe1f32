#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "spongelab/error.hpp"
#include "spongelab/perturbation.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/tensor_io.hpp"

using namespace spongelab;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::string expect_format_error(const fs::path& path) {
  try {
    load_patch(path);
  } catch (const FormatError& e) {
    return e.what();
  }
  FAIL("expected a format error");
  return {};
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / name; }

}  // namespace

TEST_CASE("patching a zero video counts exactly the patch pixels") {
  const VideoTensor zero(Tensor::zeros({8, 32, 32, 3}));
  const auto out = apply_patch(zero, Tensor::filled({8, 8, 3}, 1.0), 24, 24);
  std::size_t ones = 0;
  for (double v : out.pixels().data()) ones += v == 1.0;
  CHECK(ones == 8u * 8u * 3u * 8u);
  CHECK(zero.pixels().data()[0] == 0.0);  // input untouched
}

TEST_CASE("patching changes only the patch region and is idempotent") {
  const auto video = gen_video(3, Label::yes, Domain::a).video;
  const Tensor delta = random_tensor({5, 7, 3}, 1, 0.0, 1.0);
  const auto once = apply_patch(video, delta, 4, 10);
  const auto twice = apply_patch(once, delta, 4, 10);
  CHECK(once.pixels().to_vector() == twice.pixels().to_vector());
  std::size_t changed_slots = 0;
  for (std::size_t t = 0; t < video.frames(); ++t)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const bool inside = y >= 4 && y < 9 && x >= 10 && x < 17;
          if (inside) {
            ++changed_slots;
            CHECK(once.at(t, y, x, c) == delta[((y - 4) * 7 + (x - 10)) * 3 + c]);
          } else {
            CHECK(once.at(t, y, x, c) == video.at(t, y, x, c));
          }
        }
  CHECK(changed_slots == 8u * 5u * 7u * 3u);
}

TEST_CASE("patch bounds and values are validated") {
  const auto video = gen_video(3, Label::yes, Domain::a).video;
  CHECK_THROWS_AS(apply_patch(video, Tensor::filled({8, 8, 3}, 0.5), 25, 0), ValidationError);
  CHECK_THROWS_AS(apply_patch(video, Tensor::filled({8, 8, 3}, 0.5), -1, 0), ValidationError);
  CHECK_THROWS_AS(apply_patch(video, Tensor::filled({8, 8, 3}, 1.5), 0, 0), ValidationError);
  CHECK_THROWS_AS(apply_patch(video, Tensor::filled({8, 8, 1}, 0.5), 0, 0), Error);
}

TEST_CASE("additive noise is projected then range clamped") {
  const auto set = FeasibleSet::additive(0.05);
  std::vector<double> raw(32 * 32 * 3, 0.2);
  raw[1] = -0.2;
  const Tensor noise({32, 32, 3}, raw);
  const Tensor projected = project(noise, set);
  CHECK(projected[0] == 0.05);
  CHECK(projected[1] == -0.05);

  const auto video = gen_video(2, Label::no, Domain::b).video;
  const auto same = apply_additive(video, Tensor::zeros({32, 32, 3}), set);
  CHECK(same.pixels().to_vector() == video.pixels().to_vector());

  Tensor bright = Tensor::filled({1, 32, 32, 3}, 0.99);
  const auto clipped = apply_additive(VideoTensor(bright), Tensor::filled({32, 32, 3}, 0.05), set);
  CHECK(clipped.at(0, 0, 0, 0) == 1.0);

  const auto out = apply_additive(video, noise, set);
  for (std::size_t i = 0; i < out.pixels().size(); ++i) {
    CHECK(std::abs(out.pixels()[i] - video.pixels()[i]) <= 0.05 + 1e-15);
  }
  CHECK_THROWS_AS(apply_additive(video, Tensor::zeros({32, 31, 3}), set), Error);
  CHECK_THROWS_AS(FeasibleSet::additive(0.0), ValidationError);
}

TEST_CASE("projection examples and properties") {
  const auto rep = FeasibleSet::replacement();
  const auto add = FeasibleSet::additive(0.05);
  CHECK(project(Tensor::vector({1.3}), rep)[0] == 1.0);
  CHECK(project(Tensor::vector({-0.02}), add)[0] == -0.02);

  const Tensor a = random_tensor({200}, 3, -2.0, 2.0);
  const Tensor b = random_tensor({200}, 4, -2.0, 2.0);
  for (const auto& set : {rep, add}) {
    const Tensor pa = project(a, set), pb = project(b, set);
    CHECK(project(pa, set).to_vector() == pa.to_vector());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(pa[i] - pb[i]) <= std::abs(a[i] - b[i]));
      CHECK(pa[i] >= set.lower());
      CHECK(pa[i] <= set.upper());
    }
  }
  CHECK_THROWS_AS(project(Tensor::vector({std::nan("")}), rep), NumericError);
}

TEST_CASE("placements") {
  const auto br = Placement::bottom_right(32, 32, 8, 8);
  CHECK(br.row == 24);
  CHECK(br.col == 24);

  PlacementSampler s1(Placement::random(9), 32, 32, 8, 8);
  PlacementSampler s2(Placement::random(9), 32, 32, 8, 8);
  bool moved = false;
  std::pair<int, int> first = s1.next();
  (void)s2.next();
  for (int i = 0; i < 200; ++i) {
    const auto a = s1.next(), b = s2.next();
    CHECK(a == b);
    CHECK(a.first >= 0);
    CHECK(a.first <= 24);
    CHECK(a.second >= 0);
    CHECK(a.second <= 24);
    moved = moved || a != first;
  }
  CHECK(moved);
  CHECK(s1.for_index(5) == s2.for_index(5));

  PlacementSampler fixed(Placement::fixed(3, 4), 32, 32, 8, 8);
  CHECK(fixed.next() == std::pair<int, int>{3, 4});
  CHECK(fixed.for_index(11) == std::pair<int, int>{3, 4});
  CHECK_THROWS_AS(PlacementSampler(Placement::fixed(30, 0), 32, 32, 8, 8), ValidationError);
}

TEST_CASE("random placement applies the drawn corner") {
  Patch patch{Tensor::filled({4, 4, 3}, 1.0), Placement::random(5)};
  const VideoTensor zero(Tensor::zeros({2, 32, 32, 3}));
  const auto out = apply_patch(zero, patch, 3);
  const auto [r, c] = PlacementSampler(patch.placement, 32, 32, 4, 4).for_index(3);
  CHECK(out.at(1, static_cast<std::size_t>(r), static_cast<std::size_t>(c), 0) == 1.0);
}

TEST_CASE("differentiable pooling matches pooling the perturbed video") {
  const ModelConfig cfg;
  const auto video = gen_video(6, Label::yes, Domain::a).video;
  const Tensor delta = random_tensor({8, 8, 3}, 5, 0.0, 1.0);
  const Tensor direct = pool_patches(apply_patch(video, delta, 24, 24), cfg);
  const Tensor graph = pooled_with_patch(video, cfg, ad::constant(delta), 24, 24).value();
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(graph[i] == doctest::Approx(direct[i]).epsilon(1e-14));

  const Tensor noise = random_tensor({32, 32, 3}, 6, -0.05, 0.05);
  const Tensor d2 = pool_patches(apply_additive(video, noise, FeasibleSet::additive(0.05)), cfg);
  const Tensor g2 = pooled_with_additive(video, cfg, ad::constant(noise)).value();
  for (std::size_t i = 0; i < d2.size(); ++i) CHECK(g2[i] == doctest::Approx(d2[i]).epsilon(1e-14));
}

TEST_CASE("VDPC round trip and corruption") {
  const auto path = temp_file("spongelab_patch.vdpc");
  for (const auto& placement : {Placement::fixed(24, 20), Placement::random(0xDEADBEEFCAFEull)}) {
    const Patch patch{random_tensor({8, 6, 3}, 8, 0.0, 1.0), placement};
    save_patch(path, patch);
    const auto loaded = load_patch(path);
    CHECK(loaded.delta.shape() == patch.delta.shape());
    CHECK(std::memcmp(loaded.delta.data().data(), patch.delta.data().data(),
                      patch.delta.size() * sizeof(double)) == 0);
    CHECK(loaded.placement.policy == placement.policy);
    CHECK(loaded.placement.row == placement.row);
    CHECK(loaded.placement.col == placement.col);
    CHECK(loaded.placement.seed == placement.seed);
  }

  const Patch patch{Tensor::filled({4, 4, 3}, 0.25), Placement::fixed(0, 0)};
  save_patch(path, patch);
  const auto bytes = fs::file_size(path);

  SUBCASE("truncated") {
    fs::resize_file(path, bytes - 5);
    CHECK(expect_format_error(path).find("truncated") != std::string::npos);
  }
  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
    f.close();
    CHECK_FALSE(expect_format_error(path).empty());
  }
  SUBCASE("future version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t two = 2;
    f.write(reinterpret_cast<const char*>(&two), 4);
    f.close();
    CHECK(expect_format_error(path).find("unsupported patch version 2") != std::string::npos);
  }
  SUBCASE("missing") {
    fs::remove(path);
    CHECK_FALSE(expect_format_error(path).empty());
  }
  fs::remove(path);
}
