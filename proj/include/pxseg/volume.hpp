#pragma once

#include "pxseg/common.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pxseg {

/// Dense 3-D scalar grid. Immutable by convention after construction.
template <class S = float>
struct Volume {
  Dims3 dims;
  VecX<S> data;  // dims.voxels() scalars, w fastest

  Volume() = default;
  Volume(Dims3 d, VecX<S> values) : dims(d), data(std::move(values)) {
    require(dims.H > 0 && dims.W > 0 && dims.D > 0, "Volume: dims must be positive");
    require(data.size() == dims.voxels(), "Volume: data length " +
            std::to_string(data.size()) + " != " + std::to_string(dims.voxels()));
    require(all_finite(data), "Volume: non-finite values");
  }

  static Volume zeros(Dims3 d) { return Volume(d, VecX<S>::Zero(d.voxels())); }

  S at(int u, int v, int w) const { return data[dims.index(u, v, w)]; }
};

/// Per-voxel class scores. Soft storage is channel-major: C planes of
/// dims.voxels() scalars each. Network outputs sum to 1 per voxel within
/// kSoftSumTol; ground-truth masks are exactly one-hot.
template <class S = float>
struct SegMap {
  static constexpr double kSoftSumTol = 1e-4;

  Dims3 dims;
  int classes = 0;
  VecX<S> soft;  // classes * dims.voxels()

  SegMap() = default;
  SegMap(Dims3 d, int C, VecX<S> values) : dims(d), classes(C), soft(std::move(values)) {
    require(dims.H > 0 && dims.W > 0 && dims.D > 0, "SegMap: dims must be positive");
    require(classes >= 2, "SegMap: need at least 2 classes");
    require(soft.size() == static_cast<long>(classes) * dims.voxels(),
            "SegMap: soft data length mismatch");
    require(all_finite(soft), "SegMap: non-finite values");
  }

  S at(int c, long voxel) const { return soft[static_cast<long>(c) * dims.voxels() + voxel]; }

  /// Argmax labels, ties broken by lowest class index.
  std::vector<uint16_t> argmax() const {
    const long n = dims.voxels();
    std::vector<uint16_t> labels(n);
    for (long i = 0; i < n; ++i) {
      int best = 0;
      S best_val = soft[i];
      for (int c = 1; c < classes; ++c) {
        const S v = soft[static_cast<long>(c) * n + i];
        if (v > best_val) { best_val = v; best = c; }
      }
      labels[i] = static_cast<uint16_t>(best);
    }
    return labels;
  }
};

/// Expands discrete labels to an exactly one-hot soft map.
template <class S = float>
SegMap<S> one_hot(Dims3 dims, const std::vector<uint16_t>& labels, int classes) {
  require(classes >= 2, "one_hot: need at least 2 classes");
  require(static_cast<long>(labels.size()) == dims.voxels(), "one_hot: label count mismatch");
  const long n = dims.voxels();
  VecX<S> soft = VecX<S>::Zero(static_cast<long>(classes) * n);
  for (long i = 0; i < n; ++i) {
    if (labels[i] >= classes)
      throw Error("one_hot: label " + std::to_string(labels[i]) + " out of range at voxel " +
                  std::to_string(i));
    soft[static_cast<long>(labels[i]) * n + i] = S(1);
  }
  return SegMap<S>(dims, classes, std::move(soft));
}

/// Per-voxel displacement vectors in voxel units, channel-major:
/// 3 planes (du, dv, dw) of dims.voxels() scalars each.
template <class S = float>
struct FlowField {
  Dims3 dims;
  VecX<S> data;  // 3 * dims.voxels()

  FlowField() = default;
  FlowField(Dims3 d, VecX<S> values) : dims(d), data(std::move(values)) {
    require(dims.H > 0 && dims.W > 0 && dims.D > 0, "FlowField: dims must be positive");
    require(data.size() == 3 * dims.voxels(), "FlowField: data length mismatch");
    require(all_finite(data), "FlowField: non-finite components");
  }

  static FlowField zeros(Dims3 d) { return FlowField(d, VecX<S>::Zero(3 * d.voxels())); }

  S at(int axis, long voxel) const { return data[static_cast<long>(axis) * dims.voxels() + voxel]; }
};

/// Client-held random key conditioning the generator.
template <class S = float>
struct PrivateKey {
  VecX<S> values;
  std::optional<uint64_t> seed_id;

  PrivateKey() = default;
  explicit PrivateKey(VecX<S> v, std::optional<uint64_t> seed = std::nullopt)
      : values(std::move(v)), seed_id(seed) {
    require(values.size() > 0, "PrivateKey: empty");
    require(all_finite(values), "PrivateKey: non-finite values");
  }
};

/// Repeat acquisitions of one subject.
template <class S = float>
struct SubjectRecord {
  std::string subject_id;
  std::vector<std::pair<Volume<S>, SegMap<S>>> scans;

  void validate() const {
    require(!scans.empty(), "SubjectRecord: no scans");
    for (const auto& [vol, seg] : scans) {
      require(vol.dims == scans.front().first.dims, "SubjectRecord: scan dims differ");
      require(seg.dims == vol.dims, "SubjectRecord: seg/vol dims differ");
    }
  }
};

}  // namespace pxseg
