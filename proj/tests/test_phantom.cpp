#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pxseg/losses.hpp"
#include "pxseg/phantom.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <set>

using namespace pxseg;

namespace {

PhantomSpec small_spec() {
  PhantomSpec spec;
  spec.subjects = 5;
  spec.scans_per_subject = 3;
  spec.seed = 404;
  return spec;
}

}  // namespace

TEST_CASE("synthesis is deterministic in the seed") {
  auto spec = small_spec();
  auto a = synthesize_subject<float>(spec, 2);
  auto b = synthesize_subject<float>(spec, 2);
  REQUIRE(a.scans.size() == b.scans.size());
  CHECK(a.subject_id == b.subject_id);
  for (size_t k = 0; k < a.scans.size(); ++k) {
    CHECK((a.scans[k].first.data == b.scans[k].first.data).all());
    CHECK((a.scans[k].second.soft == b.scans[k].second.soft).all());
  }
}

TEST_CASE("every class covers at least 1% of voxels in every scan") {
  auto spec = small_spec();
  auto corpus = synthesize_corpus<float>(spec);
  REQUIRE(static_cast<int>(corpus.size()) == spec.subjects);
  const long n = spec.dims.voxels();
  const long floor = static_cast<long>(std::ceil(0.01 * n));
  for (const auto& rec : corpus) {
    CHECK(static_cast<int>(rec.scans.size()) == spec.scans_per_subject);
    for (const auto& [vol, seg] : rec.scans) {
      auto labels = seg.argmax();
      std::vector<long> counts(spec.classes, 0);
      for (uint16_t l : labels) ++counts[l];
      for (int c = 0; c < spec.classes; ++c) {
        INFO("subject ", rec.subject_id, " class ", c);
        CHECK(counts[c] >= floor);
      }
    }
  }
}

TEST_CASE("subjects are distinct; scans of one subject stay close") {
  auto spec = small_spec();
  auto corpus = synthesize_corpus<float>(spec);

  // identity signal: same-subject scan pairs look more alike than
  // cross-subject pairs, for both images and label maps
  double intra = 0, inter = 0;
  int n_intra = 0, n_inter = 0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    for (size_t a = 0; a < corpus[i].scans.size(); ++a)
      for (size_t b = a + 1; b < corpus[i].scans.size(); ++b) {
        intra += ms_ssim(corpus[i].scans[a].first, corpus[i].scans[b].first);
        ++n_intra;
      }
    for (size_t j = i + 1; j < corpus.size(); ++j) {
      inter += ms_ssim(corpus[i].scans[0].first, corpus[j].scans[0].first);
      ++n_inter;
    }
  }
  intra /= n_intra;
  inter /= n_inter;
  INFO("intra ", intra, " inter ", inter);
  CHECK(intra > inter + 0.02);

  // label geometry differs across subjects
  auto la = corpus[0].scans[0].second.argmax();
  auto lb = corpus[1].scans[0].second.argmax();
  long diff = 0;
  for (size_t p = 0; p < la.size(); ++p) diff += (la[p] != lb[p]);
  CHECK(diff > spec.dims.voxels() / 100);
}

TEST_CASE("split_corpus is subject-disjoint, complete, and deterministic") {
  auto spec = small_spec();
  auto corpus = synthesize_corpus<float>(spec);
  auto s1 = split_corpus(corpus, 0.6, 99);
  auto s2 = split_corpus(corpus, 0.6, 99);

  CHECK(s1.train.size() == 3);
  CHECK(s1.test.size() == 2);
  std::set<std::string> seen;
  for (const auto& r : s1.train) seen.insert(r.subject_id);
  for (const auto& r : s1.test) {
    CHECK(seen.count(r.subject_id) == 0);
    seen.insert(r.subject_id);
  }
  CHECK(seen.size() == corpus.size());

  for (size_t i = 0; i < s1.train.size(); ++i)
    CHECK(s1.train[i].subject_id == s2.train[i].subject_id);

  CHECK_THROWS_AS(split_corpus(corpus, 0.0, 1), Error);
  CHECK_THROWS_AS(split_corpus(corpus, 1.0, 1), Error);
}

TEST_CASE("corpus directory round trip") {
  namespace fs = std::filesystem;
  auto spec = small_spec();
  spec.subjects = 2;
  auto corpus = synthesize_corpus<float>(spec);
  const std::string root = "phantom_roundtrip_corpus";
  save_corpus(root, corpus, spec);

  CHECK(fs::exists(fs::path(root) / "manifest.json"));
  CHECK(fs::exists(fs::path(root) / "subject-000" / "scan-00.vol"));
  CHECK(fs::exists(fs::path(root) / "subject-001" / "scan-02.seg"));

  auto loaded = load_corpus<float>(root);
  REQUIRE(loaded.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].subject_id == corpus[i].subject_id);
    REQUIRE(loaded[i].scans.size() == corpus[i].scans.size());
    for (size_t k = 0; k < corpus[i].scans.size(); ++k) {
      CHECK((loaded[i].scans[k].first.data == corpus[i].scans[k].first.data).all());
      CHECK((loaded[i].scans[k].second.soft == corpus[i].scans[k].second.soft).all());
    }
  }
  auto spec2 = corpus_spec(root);
  CHECK(spec2.seed == spec.seed);
  CHECK(spec2.dims == spec.dims);

  fs::remove_all(root);
  CHECK_THROWS_AS(load_corpus<float>(root), Error);
}
