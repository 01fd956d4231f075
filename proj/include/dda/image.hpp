#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dda/common.hpp"
#include "dda/rng.hpp"
#include "dda/tensor.hpp"

namespace dda {

// CHW float image with pixels in [0,1].
struct Image {
  int64_t c = 0, h = 0, w = 0;
  std::vector<float> px;
  std::string id;
  int label = -1;

  float at(int64_t ci, int64_t y, int64_t x) const { return px[(ci * h + y) * w + x]; }
  float& at(int64_t ci, int64_t y, int64_t x) { return px[(ci * h + y) * w + x]; }
};

inline Image make_image(int64_t c, int64_t h, int64_t w, std::string id = "",
                        int label = -1) {
  Image im;
  im.c = c;
  im.h = h;
  im.w = w;
  im.px.assign(static_cast<size_t>(c * h * w), 0.0f);
  im.id = std::move(id);
  im.label = label;
  return im;
}

// Bilinear resize (half-pixel-centered sampling). Same-size inputs are
// returned verbatim so identity resizes stay bit-exact.
inline Image resize_bilinear(const Image& src, int64_t oh, int64_t ow) {
  if (src.h == oh && src.w == ow) return src;
  Image dst = make_image(src.c, oh, ow, src.id, src.label);
  const double sy = static_cast<double>(src.h) / static_cast<double>(oh);
  const double sx = static_cast<double>(src.w) / static_cast<double>(ow);
  for (int64_t y = 0; y < oh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, static_cast<double>(src.h - 1)));
    const int64_t y0 = static_cast<int64_t>(std::floor(fy));
    const int64_t y1 = std::min(y0 + 1, src.h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < ow; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, static_cast<double>(src.w - 1)));
      const int64_t x0 = static_cast<int64_t>(std::floor(fx));
      const int64_t x1 = std::min(x0 + 1, src.w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (int64_t ci = 0; ci < src.c; ++ci) {
        const double v00 = src.at(ci, y0, x0), v01 = src.at(ci, y0, x1);
        const double v10 = src.at(ci, y1, x0), v11 = src.at(ci, y1, x1);
        const double top = v00 + (v01 - v00) * wx;
        const double bot = v10 + (v11 - v10) * wx;
        dst.at(ci, y, x) = static_cast<float>(top + (bot - top) * wy);
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, int64_t top, int64_t left, int64_t ch, int64_t cw) {
  Image dst = make_image(src.c, ch, cw, src.id, src.label);
  for (int64_t ci = 0; ci < src.c; ++ci)
    for (int64_t y = 0; y < ch; ++y)
      for (int64_t x = 0; x < cw; ++x) dst.at(ci, y, x) = src.at(ci, top + y, left + x);
  return dst;
}

inline void flip_horizontal(Image& im) {
  for (int64_t ci = 0; ci < im.c; ++ci)
    for (int64_t y = 0; y < im.h; ++y)
      for (int64_t x = 0; x < im.w / 2; ++x)
        std::swap(im.at(ci, y, x), im.at(ci, y, im.w - 1 - x));
}

inline Image rot90_image(const Image& src, int turns) {
  require(src.h == src.w, "rot90: requires square images");
  Image dst = make_image(src.c, src.h, src.w, src.id, src.label);
  auto perm = rot90_perm(src.h, src.w, turns);
  for (int64_t ci = 0; ci < src.c; ++ci)
    for (int64_t i = 0; i < src.h * src.w; ++i)
      dst.px[static_cast<size_t>(ci * src.h * src.w + i)] =
          src.px[static_cast<size_t>(ci * src.h * src.w + perm[static_cast<size_t>(i)])];
  return dst;
}

// Stacks images (all same shape) into an NCHW tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const Image*>& ims) {
  require(!ims.empty(), "stack: no images");
  const int64_t c = ims[0]->c, h = ims[0]->h, w = ims[0]->w;
  Tensor<T> out(Shape{static_cast<int64_t>(ims.size()), c, h, w});
  T* p = out.ptr();
  for (size_t n = 0; n < ims.size(); ++n) {
    require(ims[n]->c == c && ims[n]->h == h && ims[n]->w == w,
            "stack: image shape mismatch");
    for (size_t i = 0; i < ims[n]->px.size(); ++i)
      p[n * ims[n]->px.size() + i] = static_cast<T>(ims[n]->px[i]);
  }
  return out;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, int64_t n = 0) {
  require(t.ndim() == 4, "tensor_to_image: expected NCHW");
  Image im = make_image(t.dim(1), t.dim(2), t.dim(3));
  const int64_t sz = t.dim(1) * t.dim(2) * t.dim(3);
  const T* p = t.ptr() + n * sz;
  for (int64_t i = 0; i < sz; ++i) im.px[static_cast<size_t>(i)] = static_cast<float>(p[i]);
  return im;
}

}  // namespace dda
