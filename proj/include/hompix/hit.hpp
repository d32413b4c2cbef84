#pragma once

#include <cstdint>
#include <tuple>

namespace hompix {

inline constexpr int kGridSize = 256;
inline constexpr double kToaLsbNs = 1.5625;
inline constexpr double kTotLsbNs = 25.0;
/// Neighbouring pixels closer than this in ToA belong to one cluster (300 ns).
inline constexpr std::uint64_t kClusterWindowTicks = 192;

/// One thresholded pixel firing.
struct PixelHit {
  std::uint64_t toa = 0;  ///< 1.5625 ns ticks
  std::uint32_t tot = 0;  ///< 25 ns ticks
  std::uint16_t x = 0;
  std::uint16_t y = 0;

  friend bool operator==(const PixelHit&, const PixelHit&) = default;
};

/// Stream order: time, then pixel coordinates.
inline bool stream_less(const PixelHit& a, const PixelHit& b) {
  return std::tie(a.toa, a.x, a.y) < std::tie(b.toa, b.x, b.y);
}

inline int pixel_index(const PixelHit& h) { return h.y * kGridSize + h.x; }

}  // namespace hompix
