#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pxseg {

/// All data-level failures (bad dims, bad payloads, out-of-range labels)
/// surface as this exception type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

template <class S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Spatial dims (H, W, D) = extents along (u, v, w).
/// Memory order is row-major with w fastest: index = (u * W + v) * D + w.
struct Dims3 {
  int H = 0, W = 0, D = 0;

  long voxels() const { return static_cast<long>(H) * W * D; }
  bool operator==(const Dims3&) const = default;

  long index(int u, int v, int w) const {
    return (static_cast<long>(u) * W + v) * D + w;
  }
  bool contains(int u, int v, int w) const {
    return u >= 0 && u < H && v >= 0 && v < W && w >= 0 && w < D;
  }
  std::string str() const {
    return std::to_string(H) + "x" + std::to_string(W) + "x" + std::to_string(D);
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <class S>
bool all_finite(const VecX<S>& v) {
  return v.isFinite().all();
}

}  // namespace pxseg
