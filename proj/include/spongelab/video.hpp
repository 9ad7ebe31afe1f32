#pragma once

#include <cstddef>

#include "spongelab/tensor.hpp"

namespace spongelab {

/// T x H x W x C pixel volume with every value in [0, 1].
class VideoTensor {
 public:
  VideoTensor() = default;
  explicit VideoTensor(Tensor pixels);

  std::size_t frames() const { return pixels_.dim(0); }
  std::size_t height() const { return pixels_.dim(1); }
  std::size_t width() const { return pixels_.dim(2); }
  std::size_t channels() const { return pixels_.dim(3); }
  std::size_t frame_size() const { return height() * width() * channels(); }

  const Tensor& pixels() const { return pixels_; }
  double at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return pixels_[((t * height() + y) * width() + x) * channels() + c];
  }
  std::size_t index(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return ((t * height() + y) * width() + x) * channels() + c;
  }

  /// A video holding frames [first, first + count) of this one.
  VideoTensor frames_slice(std::size_t first, std::size_t count) const;
  /// Builds a video from the listed frame indices, in order.
  VideoTensor select_frames(const std::vector<std::size_t>& indices) const;

 private:
  Tensor pixels_ = Tensor::zeros({1, 1, 1, 1});
};

}  // namespace spongelab
