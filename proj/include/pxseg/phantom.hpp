#pragma once

#include "pxseg/io.hpp"
#include "pxseg/volume.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace pxseg {

/// Synthetic multi-subject corpus: nested deformed ellipsoids. Subject
/// identity is a smooth random deformation of the shared canonical anatomy;
/// scans of one subject differ only by acquisition nuisance (noise, bias
/// field, sub-voxel rigid jitter).
struct PhantomSpec {
  Dims3 dims{24, 32, 28};
  int classes = 6;  // background + 5 regions
  int subjects = 20;
  int scans_per_subject = 3;
  double identity_std = 2.0;        // voxels; 3^3 control grid of offsets
  double noise_std = 0.02;          // additive intensity noise
  double bias_strength = 0.1;       // multiplicative smooth field amplitude
  double jitter_translation = 0.3;  // voxels per axis
  double jitter_rotation = 0.02;    // radians
  uint64_t seed = 20260823;

  void validate() const {
    require(dims.H > 0 && dims.W > 0 && dims.D > 0, "PhantomSpec: dims must be positive");
    require(classes == 6, "PhantomSpec: geometry provides exactly 6 classes");
    require(subjects >= 1 && scans_per_subject >= 1, "PhantomSpec: need subjects and scans");
    require(identity_std >= 0 && noise_std >= 0 && bias_strength >= 0,
            "PhantomSpec: negative magnitude");
  }
};

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"dims", {s.dims.H, s.dims.W, s.dims.D}},
       {"classes", s.classes},
       {"subjects", s.subjects},
       {"scans_per_subject", s.scans_per_subject},
       {"identity_std", s.identity_std},
       {"noise_std", s.noise_std},
       {"bias_strength", s.bias_strength},
       {"jitter_translation", s.jitter_translation},
       {"jitter_rotation", s.jitter_rotation},
       {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
  auto d = j.at("dims");
  s.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  j.at("classes").get_to(s.classes);
  j.at("subjects").get_to(s.subjects);
  j.at("scans_per_subject").get_to(s.scans_per_subject);
  j.at("identity_std").get_to(s.identity_std);
  j.at("noise_std").get_to(s.noise_std);
  j.at("bias_strength").get_to(s.bias_strength);
  j.at("jitter_translation").get_to(s.jitter_translation);
  j.at("jitter_rotation").get_to(s.jitter_rotation);
  j.at("seed").get_to(s.seed);
}

namespace phantom_detail {

using Vec3d = std::array<double, 3>;

/// Trilinear interpolation over an n^3 control grid spanning the volume.
template <int N>
struct ControlGrid {
  std::array<Vec3d, N * N * N> offsets{};

  Vec3d eval(double u, double v, double w, Dims3 dims) const {
    const double coords[3] = {u, v, w};
    const int extents[3] = {dims.H, dims.W, dims.D};
    double frac[3];
    int lo[3];
    for (int a = 0; a < 3; ++a) {
      const double span = (extents[a] - 1) / static_cast<double>(N - 1);
      double t = std::clamp(coords[a] / span, 0.0, static_cast<double>(N - 1));
      lo[a] = std::min(static_cast<int>(t), N - 2);
      frac[a] = t - lo[a];
    }
    Vec3d out{0, 0, 0};
    for (int du = 0; du < 2; ++du)
      for (int dv = 0; dv < 2; ++dv)
        for (int dw = 0; dw < 2; ++dw) {
          const double wgt = (du ? frac[0] : 1 - frac[0]) * (dv ? frac[1] : 1 - frac[1]) *
                             (dw ? frac[2] : 1 - frac[2]);
          const auto& o = offsets[((lo[0] + du) * N + lo[1] + dv) * N + lo[2] + dw];
          for (int a = 0; a < 3; ++a) out[a] += wgt * o[a];
        }
    return out;
  }
};

/// Region label of a point in canonical normalized coords ([-1,1] per axis).
/// Precedence resolves overlaps. The outer shell stops well short of the
/// volume edge: anatomy keeps a clear multi-voxel background margin on every
/// face, so moderate spatial deformation moves only true-zero voxels across
/// the volume boundary, where it is indistinguishable from the warp's zero
/// padding.
inline int canonical_label(double x, double y, double z) {
  auto inside = [&](double cx, double cy, double cz, double rx, double ry, double rz) {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
    return dx * dx + dy * dy + dz * dz < 1.0;
  };
  if (inside(0, 0, 0, 0.29, 0.31, 0.31)) return 5;                 // central core
  if (inside(0.30, 0.27, 0.05, 0.28, 0.31, 0.31)) return 3;        // lateral blob
  if (inside(-0.30, -0.27, 0.14, 0.28, 0.31, 0.31)) return 4;      // lateral blob
  if (inside(0, 0, 0, 0.48, 0.48, 0.46)) return 2;                 // inner matter
  if (inside(0, 0, 0, 0.63, 0.71, 0.68)) return 1;                 // outer shell
  return 0;                                                        // background
}

// Background intensity is exactly 0 (and carries no noise or bias) so that
// out-of-volume zero padding introduced by warping is indistinguishable from
// in-volume background.
constexpr std::array<double, 6> kRegionIntensity{0.0, 0.35, 0.55, 0.70, 0.85, 1.0};

struct Rotation {
  double m[3][3];
  Vec3d apply(const Vec3d& p) const {
    return {m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2]};
  }
};

inline Rotation axis_angle(const Vec3d& axis, double angle) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  Rotation r;
  r.m[0][0] = t * x * x + c;     r.m[0][1] = t * x * y - s * z; r.m[0][2] = t * x * z + s * y;
  r.m[1][0] = t * x * y + s * z; r.m[1][1] = t * y * y + c;     r.m[1][2] = t * y * z - s * x;
  r.m[2][0] = t * x * z - s * y; r.m[2][1] = t * y * z + s * x; r.m[2][2] = t * z * z + c;
  return r;
}

}  // namespace phantom_detail

template <class S = float>
SubjectRecord<S> synthesize_subject(const PhantomSpec& spec, int subject_index) {
  spec.validate();
  require(subject_index >= 0 && subject_index < spec.subjects, "synthesize_subject: bad index");
  using namespace phantom_detail;

  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(subject_index) + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  const Dims3 dims = spec.dims;
  const long n = dims.voxels();
  const double cu = (dims.H - 1) / 2.0, cv = (dims.W - 1) / 2.0, cw = (dims.D - 1) / 2.0;
  const long min_coverage = static_cast<long>(std::ceil(0.01 * static_cast<double>(n)));

  // A draw can squash a small region below the 1% coverage floor; retry with
  // fresh identity deformations until every scan covers every class.
  for (int attempt = 0; attempt < 50; ++attempt) {
    ControlGrid<3> identity;
    for (auto& o : identity.offsets)
      for (int a = 0; a < 3; ++a) o[a] = spec.identity_std * normal(rng);

    SubjectRecord<S> record;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "subject-%03d", subject_index);
    record.subject_id = buf;

    bool covered = true;
    for (int scan = 0; scan < spec.scans_per_subject && covered; ++scan) {
      const Vec3d axis{unit(rng), unit(rng), unit(rng) + 1e-9};
      const Rotation rot = axis_angle(axis, spec.jitter_rotation * unit(rng));
      const Vec3d shift{spec.jitter_translation * unit(rng), spec.jitter_translation * unit(rng),
                        spec.jitter_translation * unit(rng)};
      ControlGrid<2> bias;
      for (auto& o : bias.offsets) o = {spec.bias_strength * normal(rng), 0, 0};

      VecX<S> image(n);
      std::vector<uint16_t> labels(n);
      std::vector<long> counts(spec.classes, 0);
      long p = 0;
      for (int u = 0; u < dims.H; ++u)
        for (int v = 0; v < dims.W; ++v)
          for (int w = 0; w < dims.D; ++w, ++p) {
            // rigid nuisance first, then the subject's identity deformation
            const Vec3d centered{u - cu, v - cv, w - cw};
            Vec3d q = rot.apply(centered);
            q = {q[0] + cu + shift[0], q[1] + cv + shift[1], q[2] + cw + shift[2]};
            const Vec3d d = identity.eval(q[0], q[1], q[2], dims);
            const double x = (q[0] + d[0] - cu) / cu;
            const double y = (q[1] + d[1] - cv) / cv;
            const double z = (q[2] + d[2] - cw) / cw;
            const int label = canonical_label(x, y, z);
            labels[p] = static_cast<uint16_t>(label);
            ++counts[label];
            if (label == 0) {
              image[p] = S(0);
            } else {
              const double b = 1.0 + bias.eval(u, v, w, dims)[0];
              const double val = kRegionIntensity[label] * b + spec.noise_std * normal(rng);
              image[p] = static_cast<S>(std::clamp(val, 0.0, 2.0));
            }
          }
      for (long c : counts)
        if (c < min_coverage) covered = false;
      if (covered)
        record.scans.emplace_back(Volume<S>(dims, std::move(image)),
                                  one_hot<S>(dims, labels, spec.classes));
    }
    if (covered) {
      record.validate();
      return record;
    }
  }
  throw Error("synthesize_subject: could not reach 1% class coverage in 50 attempts");
}

template <class S = float>
std::vector<SubjectRecord<S>> synthesize_corpus(const PhantomSpec& spec) {
  spec.validate();
  std::vector<SubjectRecord<S>> out;
  out.reserve(spec.subjects);
  for (int i = 0; i < spec.subjects; ++i) out.push_back(synthesize_subject<S>(spec, i));
  return out;
}

/// Subject-disjoint partition: every subject lands in exactly one side.
template <class S>
struct CorpusSplit {
  std::vector<SubjectRecord<S>> train;
  std::vector<SubjectRecord<S>> test;
};

template <class S>
CorpusSplit<S> split_corpus(const std::vector<SubjectRecord<S>>& records, double train_fraction,
                            uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "split_corpus: fraction must be in (0,1)");
  require(records.size() >= 2, "split_corpus: need at least 2 subjects");
  std::vector<size_t> order(records.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  size_t train_count = static_cast<size_t>(std::lround(train_fraction * records.size()));
  train_count = std::clamp<size_t>(train_count, 1, records.size() - 1);
  CorpusSplit<S> out;
  for (size_t i = 0; i < order.size(); ++i)
    (i < train_count ? out.train : out.test).push_back(records[order[i]]);
  return out;
}

// ---- corpus directory layout: <root>/<subject-id>/scan-<k>.{vol,seg} ----

template <class S>
void save_corpus(const std::string& root, const std::vector<SubjectRecord<S>>& records,
                 const PhantomSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["spec"] = spec;
  manifest["subjects"] = nlohmann::json::array();
  for (const auto& rec : records) {
    rec.validate();
    fs::create_directories(fs::path(root) / rec.subject_id);
    nlohmann::json entry;
    entry["id"] = rec.subject_id;
    entry["scans"] = nlohmann::json::array();
    for (size_t k = 0; k < rec.scans.size(); ++k) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "scan-%02zu", k);
      const std::string rel_vol = rec.subject_id + "/" + buf + ".vol";
      const std::string rel_seg = rec.subject_id + "/" + buf + ".seg";
      write_file((fs::path(root) / rel_vol).string(), serialize(rec.scans[k].first));
      write_file((fs::path(root) / rel_seg).string(),
                 serialize_labels(rec.scans[k].second.dims, rec.scans[k].second.argmax(),
                                  rec.scans[k].second.classes));
      entry["scans"].push_back({{"volume", rel_vol}, {"labels", rel_seg}});
    }
    manifest["subjects"].push_back(entry);
  }
  std::ofstream f((fs::path(root) / "manifest.json").string());
  require(f.good(), "save_corpus: cannot write manifest");
  f << manifest.dump(2) << "\n";
}

template <class S = float>
std::vector<SubjectRecord<S>> load_corpus(const std::string& root) {
  namespace fs = std::filesystem;
  std::ifstream f((fs::path(root) / "manifest.json").string());
  if (!f.good()) throw Error("load_corpus: no manifest.json under " + root);
  nlohmann::json manifest = nlohmann::json::parse(f);
  if (manifest.at("format_version").get<int>() != 1)
    throw Error("load_corpus: unsupported manifest version");
  std::vector<SubjectRecord<S>> out;
  for (const auto& entry : manifest.at("subjects")) {
    SubjectRecord<S> rec;
    rec.subject_id = entry.at("id").get<std::string>();
    for (const auto& scan : entry.at("scans")) {
      auto vol_bytes = read_file((fs::path(root) / scan.at("volume").get<std::string>()).string());
      auto seg_bytes = read_file((fs::path(root) / scan.at("labels").get<std::string>()).string());
      auto vol = deserialize_volume<S>(vol_bytes.data(), vol_bytes.size());
      auto seg = deserialize_labels(seg_bytes.data(), seg_bytes.size());
      require(seg.dims == vol.dims, "load_corpus: seg/vol dims differ");
      rec.scans.emplace_back(std::move(vol), one_hot<S>(seg.dims, seg.labels, seg.classes));
    }
    rec.validate();
    out.push_back(std::move(rec));
  }
  return out;
}

template <class S = float>
PhantomSpec corpus_spec(const std::string& root) {
  std::ifstream f((std::filesystem::path(root) / "manifest.json").string());
  if (!f.good()) throw Error("corpus_spec: no manifest.json under " + root);
  return nlohmann::json::parse(f).at("spec").get<PhantomSpec>();
}

}  // namespace pxseg
