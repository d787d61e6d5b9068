#pragma once

#include "pxseg/losses.hpp"
#include "pxseg/networks.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <vector>

namespace pxseg {

/// One leave-one-out retrieval task: gallery indices ordered by descending
/// similarity to the query, with same-subject relevance flags.
struct RetrievalRanking {
  int query = 0;
  std::vector<int> candidates;
  std::vector<int> relevant;  // aligned with candidates, 1 iff same subject

  void validate() const {
    require(candidates.size() == relevant.size(), "RetrievalRanking: flag count mismatch");
    require(!candidates.empty(), "RetrievalRanking: empty gallery");
    for (int c : candidates) require(c != query, "RetrievalRanking: query present in gallery");
  }
};

inline double precision_at_k(const RetrievalRanking& r, int k) {
  r.validate();
  if (k < 1 || k > static_cast<int>(r.candidates.size()))
    throw Error("precision_at_k: k = " + std::to_string(k) + " outside [1, " +
                std::to_string(r.candidates.size()) + "]");
  long hits = 0;
  for (int i = 0; i < k; ++i) hits += r.relevant[i];
  return static_cast<double>(hits) / k;
}

/// AP = (1/R) sum_k precision@k * s~_ik. Empty relevance set: no retrieval
/// task exists, so the result is undefined (callers exclude it from mAP).
inline std::optional<double> average_precision(const RetrievalRanking& r) {
  r.validate();
  const long total = std::accumulate(r.relevant.begin(), r.relevant.end(), 0L);
  if (total == 0) return std::nullopt;
  double sum = 0;
  long hits = 0;
  for (size_t k = 0; k < r.candidates.size(); ++k) {
    hits += r.relevant[k];
    if (r.relevant[k]) sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(total);
}

struct ReidResult {
  double map = 0;
  int queries = 0;           // queries contributing to the mean
  int excluded_queries = 0;  // queries with no same-subject gallery item
  std::optional<double> f1;  // same/different F1 at threshold 0.5 (Siamese only)
};

/// Chance-level mAP: mean per-query fraction of same-subject gallery items.
inline double chance_level(const std::vector<int>& subject_of) {
  require(subject_of.size() >= 2, "chance_level: need at least 2 items");
  double sum = 0;
  int queries = 0;
  for (size_t i = 0; i < subject_of.size(); ++i) {
    long same = 0;
    for (size_t j = 0; j < subject_of.size(); ++j)
      if (j != i && subject_of[j] == subject_of[i]) ++same;
    if (same > 0) {
      sum += static_cast<double>(same) / static_cast<double>(subject_of.size() - 1);
      ++queries;
    }
  }
  require(queries > 0, "chance_level: no subject has 2+ items");
  return sum / queries;
}

/// Leave-one-out retrieval over a symmetric similarity matrix. Ties broken by
/// ascending index for determinism.
inline ReidResult reid_from_similarity(const MatX<double>& sim,
                                       const std::vector<int>& subject_of) {
  const int n = static_cast<int>(subject_of.size());
  require(sim.rows() == n && sim.cols() == n, "reid: similarity matrix shape mismatch");
  require(n >= 2, "reid: empty gallery");
  ReidResult out;
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    RetrievalRanking r;
    r.query = i;
    for (int j = 0; j < n; ++j)
      if (j != i) r.candidates.push_back(j);
    std::stable_sort(r.candidates.begin(), r.candidates.end(),
                     [&](int a, int b) { return sim(i, a) > sim(i, b); });
    for (int c : r.candidates) r.relevant.push_back(subject_of[c] == subject_of[i] ? 1 : 0);
    if (auto ap = average_precision(r)) {
      sum += *ap;
      ++out.queries;
    } else {
      ++out.excluded_queries;
    }
  }
  require(out.queries > 0, "reid: every query lacks a same-subject gallery item");
  out.map = sum / out.queries;
  return out;
}

/// F1 of same/different classification over all unordered pairs.
inline double pair_f1(const MatX<double>& sim, const std::vector<int>& subject_of,
                      double threshold = 0.5) {
  const int n = static_cast<int>(subject_of.size());
  long tp = 0, fp = 0, fn = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const bool same = subject_of[i] == subject_of[j];
      const bool pred = sim(i, j) > threshold;
      tp += same && pred;
      fp += !same && pred;
      fn += same && !pred;
    }
  if (2 * tp + fp + fn == 0) return 0.0;
  return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

// ---- similarity matrices ----

template <class S>
MatX<double> pairwise_ms_ssim(const std::vector<Volume<S>>& items, const SsimConfig& cfg = {}) {
  const int n = static_cast<int>(items.size());
  MatX<double> sim = MatX<double>::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    sim(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j)
      sim(i, j) = sim(j, i) = static_cast<double>(ms_ssim(items[i], items[j], cfg));
  }
  return sim;
}

template <class S>
MatX<double> pairwise_ms_ssim(const std::vector<SegMap<S>>& items, const SsimConfig& cfg = {}) {
  const int n = static_cast<int>(items.size());
  MatX<double> sim = MatX<double>::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    sim(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j)
      sim(i, j) = sim(j, i) = static_cast<double>(ms_ssim(items[i], items[j], cfg));
  }
  return sim;
}

template <class S>
MatX<double> pairwise_siamese(const SiameseDiscriminator<S>& d,
                              const std::vector<SegMap<S>>& items) {
  const int n = static_cast<int>(items.size());
  MatX<double> sim = MatX<double>::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    sim(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j)
      sim(i, j) = sim(j, i) = static_cast<double>(discriminate(d, items[i], items[j]));
  }
  return sim;
}

// ---- attacks ----

template <class Item>
ReidResult reid_attack_ms_ssim(const std::vector<Item>& items, const std::vector<int>& subject_of,
                               const SsimConfig& cfg = {}) {
  require(items.size() == subject_of.size(), "reid_attack: id count mismatch");
  return reid_from_similarity(pairwise_ms_ssim(items, cfg), subject_of);
}

template <class S>
ReidResult reid_attack_siamese(const SiameseDiscriminator<S>& d,
                               const std::vector<SegMap<S>>& items,
                               const std::vector<int>& subject_of) {
  require(items.size() == subject_of.size(), "reid_attack: id count mismatch");
  MatX<double> sim = pairwise_siamese(d, items);
  ReidResult out = reid_from_similarity(sim, subject_of);
  out.f1 = pair_f1(sim, subject_of);
  return out;
}

// ---- segmentation accuracy ----

struct DscReport {
  std::vector<double> per_class;  // hard Dice on argmaxed predictions
  std::vector<bool> absent;       // class empty in both prediction and truth
  double overall = 0;             // truth-size-weighted mean over non-background classes
};

/// Aggregates voxel counts across all given pairs (micro-average). Class 0 is
/// treated as background and excluded from the overall score, matching the
/// convention of reporting "overall" across anatomical regions only.
template <class S>
DscReport dsc_report(const std::vector<SegMap<S>>& preds, const std::vector<SegMap<S>>& truths) {
  require(!preds.empty() && preds.size() == truths.size(), "dsc_report: pair count mismatch");
  const int C = preds[0].classes;
  std::vector<long> inter(C, 0), psize(C, 0), tsize(C, 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    require(preds[i].dims == truths[i].dims && preds[i].classes == C &&
                truths[i].classes == C,
            "dsc_report: shape mismatch at pair " + std::to_string(i));
    auto pl = preds[i].argmax();
    auto tl = truths[i].argmax();
    for (size_t p = 0; p < pl.size(); ++p) {
      ++psize[pl[p]];
      ++tsize[tl[p]];
      if (pl[p] == tl[p]) ++inter[pl[p]];
    }
  }
  DscReport rep;
  rep.per_class.resize(C);
  rep.absent.resize(C);
  double weighted = 0, weight = 0;
  for (int c = 0; c < C; ++c) {
    rep.absent[c] = (psize[c] + tsize[c] == 0);
    rep.per_class[c] = rep.absent[c]
                           ? 1.0
                           : 2.0 * inter[c] / static_cast<double>(psize[c] + tsize[c]);
    if (c > 0) {
      weighted += static_cast<double>(tsize[c]) * rep.per_class[c];
      weight += static_cast<double>(tsize[c]);
    }
  }
  rep.overall = weight > 0 ? weighted / weight : 1.0;
  return rep;
}

// ---- inter/intra similarity histograms ----

struct Histogram {
  static constexpr int kBins = 50;
  std::array<double, kBins> bins{};  // normalized to sum 1 when count > 0
  double lo = 0.0, hi = 1.0;
  int count = 0;
};

inline Histogram make_histogram(const std::vector<double>& values, double lo = 0.0,
                                double hi = 1.0) {
  require(hi > lo, "make_histogram: empty range");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  for (double v : values) {
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    const int bin = std::min(Histogram::kBins - 1, static_cast<int>(t * Histogram::kBins));
    h.bins[bin] += 1.0;
    ++h.count;
  }
  if (h.count > 0)
    for (double& b : h.bins) b /= h.count;
  return h;
}

/// Overlap of two normalized histograms: sum of per-bin minima, in [0, 1].
inline double histogram_intersection(const Histogram& a, const Histogram& b) {
  require(a.lo == b.lo && a.hi == b.hi, "histogram_intersection: range mismatch");
  double sum = 0;
  for (int i = 0; i < Histogram::kBins; ++i) sum += std::min(a.bins[i], b.bins[i]);
  return sum;
}

struct HistogramPair {
  Histogram intra, inter;
  double intersection = 0;
};

inline HistogramPair split_histograms(const MatX<double>& sim,
                                      const std::vector<int>& subject_of) {
  const int n = static_cast<int>(subject_of.size());
  require(sim.rows() == n && sim.cols() == n, "split_histograms: shape mismatch");
  std::vector<double> intra, inter;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      (subject_of[i] == subject_of[j] ? intra : inter).push_back(sim(i, j));
  require(!intra.empty() && !inter.empty(),
          "split_histograms: need both same-subject and different-subject pairs");
  HistogramPair out;
  out.intra = make_histogram(intra);
  out.inter = make_histogram(inter);
  out.intersection = histogram_intersection(out.intra, out.inter);
  return out;
}

template <class Item>
HistogramPair similarity_histograms(const std::vector<Item>& items,
                                    const std::vector<int>& subject_of,
                                    const SsimConfig& cfg = {}) {
  require(items.size() == subject_of.size(), "similarity_histograms: id count mismatch");
  return split_histograms(pairwise_ms_ssim(items, cfg), subject_of);
}

}  // namespace pxseg
