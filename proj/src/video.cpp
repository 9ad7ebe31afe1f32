#include "spongelab/video.hpp"

#include <algorithm>

#include "spongelab/error.hpp"

namespace spongelab {

VideoTensor::VideoTensor(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 4) {
    throw ShapeError("video must be T x H x W x C, got " + shape_to_string(pixels_.shape()));
  }
  for (std::size_t d : pixels_.shape()) {
    if (d == 0) throw ShapeError("video extents must be positive");
  }
  for (double v : pixels_.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("video pixel outside [0, 1]");
  }
}

VideoTensor VideoTensor::frames_slice(std::size_t first, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return select_frames(idx);
}

VideoTensor VideoTensor::select_frames(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw ShapeError("cannot build a video with zero frames");
  const std::size_t fs = frame_size();
  std::vector<double> out;
  out.reserve(indices.size() * fs);
  const auto src = pixels_.data();
  for (std::size_t t : indices) {
    if (t >= frames()) throw ShapeError("frame index out of range");
    out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(t * fs),
               src.begin() + static_cast<std::ptrdiff_t>((t + 1) * fs));
  }
  return VideoTensor(Tensor({indices.size(), height(), width(), channels()}, std::move(out)));
}

}  // namespace spongelab
