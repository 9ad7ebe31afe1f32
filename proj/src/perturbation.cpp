#include "spongelab/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "spongelab/error.hpp"
#include "spongelab/tensor_io.hpp"

namespace spongelab {

namespace {

constexpr char kPatchMagic[4] = {'V', 'D', 'P', 'C'};
constexpr std::uint32_t kPatchVersion = 1;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void check_patch_fits(const VideoTensor& video, const Tensor& delta, int row, int col) {
  if (delta.rank() != 3 || delta.dim(2) != video.channels()) {
    throw ShapeError("patch shape " + shape_to_string(delta.shape()) +
                     " does not match a video with " + std::to_string(video.channels()) +
                     " channels");
  }
  if (row < 0 || col < 0 || sz(row) + delta.dim(0) > video.height() ||
      sz(col) + delta.dim(1) > video.width()) {
    throw ValidationError("patch at (" + std::to_string(row) + ", " + std::to_string(col) +
                          ") falls outside the frame");
  }
}

void check_frame_shape(const VideoTensor& video, const ModelConfig& cfg) {
  if (video.height() != sz(cfg.height) || video.width() != sz(cfg.width) ||
      video.channels() != sz(cfg.channels)) {
    throw ShapeError("video shape " + shape_to_string(video.pixels().shape()) +
                     " does not match the model's frame configuration");
  }
}

}  // namespace

std::string to_string(PerturbationMode m) {
  return m == PerturbationMode::replacement ? "replacement" : "additive";
}

PerturbationMode parse_mode(const std::string& s) {
  if (s == "replacement" || s == "patch") return PerturbationMode::replacement;
  if (s == "additive") return PerturbationMode::additive;
  throw ValidationError("unknown perturbation mode '" + s + "'");
}

std::string to_string(Placement::Policy p) {
  return p == Placement::Policy::fixed ? "fixed" : "random";
}

Placement::Policy parse_policy(const std::string& s) {
  if (s == "fixed") return Placement::Policy::fixed;
  if (s == "random") return Placement::Policy::random;
  throw ValidationError("unknown placement policy '" + s + "'");
}

FeasibleSet FeasibleSet::additive(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    throw ValidationError("additive budget epsilon must be positive and finite");
  }
  return {PerturbationMode::additive, eps};
}

Tensor project(const Tensor& x, const FeasibleSet& set) {
  auto v = x.to_vector();
  for (auto& e : v) {
    if (!std::isfinite(e)) throw NumericError("cannot project a non-finite value");
    e = std::clamp(e, set.lower(), set.upper());
  }
  return Tensor(x.shape(), std::move(v));
}

Placement Placement::bottom_right(int height, int width, int patch_h, int patch_w) {
  if (patch_h > height || patch_w > width) throw ValidationError("patch larger than frame");
  return fixed(height - patch_h, width - patch_w);
}

PlacementSampler::PlacementSampler(const Placement& placement, int height, int width, int patch_h,
                                   int patch_w)
    : placement_(placement),
      max_row_(height - patch_h),
      max_col_(width - patch_w),
      rng_(mix_seed(placement.seed, hash_name("placement"))) {
  if (patch_h < 1 || patch_w < 1 || max_row_ < 0 || max_col_ < 0) {
    throw ValidationError("patch of " + std::to_string(patch_h) + "x" + std::to_string(patch_w) +
                          " does not fit a " + std::to_string(height) + "x" +
                          std::to_string(width) + " frame");
  }
  if (placement.policy == Placement::Policy::fixed &&
      (placement.row < 0 || placement.col < 0 || placement.row > max_row_ ||
       placement.col > max_col_)) {
    throw ValidationError("fixed patch corner falls outside the frame");
  }
}

std::pair<int, int> PlacementSampler::next() {
  if (placement_.policy == Placement::Policy::fixed) return {placement_.row, placement_.col};
  const int r = static_cast<int>(rng_.below(static_cast<std::uint64_t>(max_row_) + 1));
  const int c = static_cast<int>(rng_.below(static_cast<std::uint64_t>(max_col_) + 1));
  return {r, c};
}

std::pair<int, int> PlacementSampler::for_index(std::uint64_t index) const {
  if (placement_.policy == Placement::Policy::fixed) return {placement_.row, placement_.col};
  Rng rng(mix_seed(mix_seed(placement_.seed, hash_name("evaluation")), index));
  const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_row_) + 1));
  const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_col_) + 1));
  return {r, c};
}

VideoTensor apply_patch(const VideoTensor& video, const Tensor& delta, int row, int col) {
  check_patch_fits(video, delta, row, col);
  for (double v : delta.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("patch values must lie in [0, 1]");
  }
  auto px = video.pixels().to_vector();
  const std::size_t ph = delta.dim(0), pw = delta.dim(1), ch = delta.dim(2);
  for (std::size_t t = 0; t < video.frames(); ++t)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x)
        for (std::size_t c = 0; c < ch; ++c)
          px[video.index(t, sz(row) + y, sz(col) + x, c)] = delta[(y * pw + x) * ch + c];
  return VideoTensor(Tensor(video.pixels().shape(), std::move(px)));
}

VideoTensor apply_patch(const VideoTensor& video, const Patch& patch, std::uint64_t index) {
  const PlacementSampler sampler(patch.placement, static_cast<int>(video.height()),
                                 static_cast<int>(video.width()), patch.height(), patch.width());
  const auto [r, c] = sampler.for_index(index);
  return apply_patch(video, patch.delta, r, c);
}

VideoTensor apply_additive(const VideoTensor& video, const Tensor& noise, const FeasibleSet& set) {
  if (set.mode != PerturbationMode::additive) {
    throw ValidationError("additive application needs an additive feasible set");
  }
  if (noise.shape() != Shape{video.height(), video.width(), video.channels()}) {
    throw ShapeError("noise shape " + shape_to_string(noise.shape()) +
                     " does not match one frame of the video");
  }
  const auto n = project(noise, set);
  auto px = video.pixels().to_vector();
  const std::size_t fs = video.frame_size();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + n[i % fs], 0.0, 1.0);
  return VideoTensor(Tensor(video.pixels().shape(), std::move(px)));
}

ad::Expr pooled_with_patch(const VideoTensor& video, const ModelConfig& cfg, const ad::Expr& delta,
                           int row, int col) {
  check_frame_shape(video, cfg);
  const Tensor& d = delta.value();
  check_patch_fits(video, d, row, col);
  // Patched pixels carry the same value in every frame, so their time mean is
  // the patch value itself; the rest of the frame stays constant.
  const auto base = pool_patches(apply_patch(video, Tensor::zeros(d.shape()), row, col), cfg);
  const PatchLayout layout(cfg);
  const std::size_t pw = d.dim(1), ch = d.dim(2);
  std::vector<ad::MapEntry> entries;
  entries.reserve(d.size());
  for (std::size_t y = 0; y < d.dim(0); ++y)
    for (std::size_t x = 0; x < pw; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        entries.push_back({layout.slot(sz(row) + y, sz(col) + x, c), (y * pw + x) * ch + c, 1.0});
  return ad::add(ad::constant(base), ad::linear_map(delta, base.shape(), entries));
}

ad::Expr pooled_with_additive(const VideoTensor& video, const ModelConfig& cfg,
                              const ad::Expr& noise) {
  check_frame_shape(video, cfg);
  if (noise.shape() != Shape{video.height(), video.width(), video.channels()}) {
    throw ShapeError("noise shape " + shape_to_string(noise.shape()) +
                     " does not match one frame of the video");
  }
  const std::size_t frames = video.frames(), fs = video.frame_size();
  std::vector<ad::MapEntry> spread, pool;
  spread.reserve(frames * fs);
  pool.reserve(frames * fs);
  const PatchLayout layout(cfg);
  const double inv_t = 1.0 / static_cast<double>(frames);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t y = 0; y < video.height(); ++y)
      for (std::size_t x = 0; x < video.width(); ++x)
        for (std::size_t c = 0; c < video.channels(); ++c) {
          const std::size_t flat = video.index(t, y, x, c);
          spread.push_back({flat, flat - t * fs, 1.0});
          pool.push_back({layout.slot(y, x, c), flat, inv_t});
        }
  const auto tiled = ad::linear_map(noise, {frames * fs}, spread);
  const auto px = ad::clamp(
      ad::add(ad::constant(video.pixels().reshaped({frames * fs})), tiled), 0.0, 1.0);
  return ad::linear_map(px, {layout.tokens(), layout.dim()}, pool);
}

void save_patch(const std::filesystem::path& path, const Patch& patch) {
  if (patch.delta.rank() != 3) throw ShapeError("patch must have rank 3");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out.write(kPatchMagic, 4);
  io::put_u32(out, kPatchVersion);
  for (std::size_t i = 0; i < 3; ++i) io::put_u32(out, static_cast<std::uint32_t>(patch.delta.dim(i)));
  if (patch.placement.policy == Placement::Policy::fixed) {
    io::put_u64(out, 0);
    io::put_u32(out, static_cast<std::uint32_t>(patch.placement.row));
    io::put_u32(out, static_cast<std::uint32_t>(patch.placement.col));
  } else {
    io::put_u64(out, 1);
    io::put_u64(out, patch.placement.seed);
  }
  io::put_f64s(out, patch.delta.data());
  if (!out) throw Error(path.string() + ": write failed");
}

Patch load_patch(const std::filesystem::path& path) {
  const std::string what = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(what + ": missing file");
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4) throw FormatError(what + ": truncated file");
  if (std::memcmp(magic, kPatchMagic, 4) != 0) throw FormatError(what + ": bad magic bytes");
  const auto version = io::get_u32(in, what);
  if (version != kPatchVersion) {
    throw FormatError(what + ": unsupported patch version " + std::to_string(version));
  }
  Shape shape(3);
  for (auto& d : shape) d = io::get_u32(in, what);
  Patch patch;
  const auto code = io::get_u64(in, what);
  if (code == 0) {
    const auto r = static_cast<int>(io::get_u32(in, what));
    const auto c = static_cast<int>(io::get_u32(in, what));
    patch.placement = Placement::fixed(r, c);
  } else if (code == 1) {
    patch.placement = Placement::random(io::get_u64(in, what));
  } else {
    throw FormatError(what + ": unknown placement code " + std::to_string(code));
  }
  auto payload = io::get_f64s(in, shape_size(shape), what);
  for (double v : payload) {
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError(what + ": patch value outside [0, 1]");
  }
  patch.delta = Tensor(shape, std::move(payload));
  return patch;
}

}  // namespace spongelab
