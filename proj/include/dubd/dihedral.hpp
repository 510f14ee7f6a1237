#pragma once

#include "dubd/tensor.hpp"

namespace dubd {

/// The 8 symmetries of the square acting on the spatial axes.
/// Index k in [0, 4) is a counter-clockwise rotation by k * 90 degrees;
/// k in [4, 8) is that rotation followed by a horizontal flip.
template <typename T>
Tensor<T> dihedral_transform(const Tensor<T>& x, int k) {
  if (k < 0 || k > 7) throw ConfigError("dihedral index must be in [0, 8)");
  const Shape s = x.shape();
  const int rot = k % 4;
  const bool flip = k >= 4;
  const bool swap = rot % 2 == 1;
  const Shape os{s.n, s.c, swap ? s.w : s.h, swap ? s.h : s.w};
  auto out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (int oy = 0; oy < os.h; ++oy) {
    for (int ox0 = 0; ox0 < os.w; ++ox0) {
      const int ox = flip ? os.w - 1 - ox0 : ox0;  // undo the flip to find the rotated coordinate
      int sy = 0, sx = 0;
      switch (rot) {
        case 0: sy = oy; sx = ox; break;
        case 1: sy = ox; sx = s.w - 1 - oy; break;
        case 2: sy = s.h - 1 - oy; sx = s.w - 1 - ox; break;
        default: sy = s.h - 1 - ox; sx = oy; break;
      }
      const std::size_t dst = static_cast<std::size_t>(oy) * os.w + ox0;
      const std::size_t src = static_cast<std::size_t>(sy) * s.w + sx;
      for (std::size_t p = 0; p < planes; ++p) ov[p * os.plane() + dst] = xv[p * s.plane() + src];
    }
  }
  return out;
}

/// Index of the inverse element: rotations invert to 4 - k, reflections are involutions.
inline int dihedral_inverse(int k) { return k < 4 ? (4 - k) % 4 : k; }

}  // namespace dubd
