#pragma once

#include "uvsplat/math.hpp"

#include <vector>

namespace uvsplat {

/// Interleaved row-major float image.
template <typename T> struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T(0))
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  size_t pixels() const { return static_cast<size_t>(width) * height; }
  T& operator()(int x, int y, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  T operator()(int x, int y, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height && channels == o.channels; }

  template <typename U> Image<U> cast() const {
    Image<U> o(width, height, channels);
    for (size_t i = 0; i < data.size(); ++i) o.data[i] = static_cast<U>(data[i]);
    return o;
  }
};

}  // namespace uvsplat
