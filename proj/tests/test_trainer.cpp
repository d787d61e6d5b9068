#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pxseg/trainer.hpp"

#include <filesystem>

using namespace pxseg;

namespace {

PhantomSpec tiny_phantom() {
  PhantomSpec spec;
  spec.dims = {12, 16, 16};
  spec.subjects = 4;
  spec.scans_per_subject = 2;
  spec.seed = 71;
  return spec;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.net.dims = {12, 16, 16};
  cfg.net.classes = 6;
  cfg.net.key_length = 4;
  cfg.net.base_channels = 2;
  cfg.epochs = 1;
  cfg.seed = 5;
  return cfg;
}

struct Hashes {
  uint64_t g, s, d;
};

Hashes hashes(Trainer<float>& t) {
  return {param_hash(t.generator().params()), param_hash(t.segmenter().params()),
          param_hash(t.discriminator().params())};
}

}  // namespace

TEST_CASE("sample_pairs: labels match subject identity, balance is exact") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());
  std::mt19937_64 rng(3);
  auto pairs = sample_pairs(corpus, 100, rng);
  REQUIRE(pairs.size() == 100);
  int positives = 0;
  for (const auto& p : pairs) {
    // brute-force oracle: the label must equal subject-index equality
    CHECK(p.label == (p.subject_a == p.subject_b ? 1 : 0));
    if (p.label == 1) {
      CHECK(p.scan_a != p.scan_b);
      ++positives;
    }
    CHECK(corpus[p.subject_a].scans.size() > static_cast<size_t>(p.scan_a));
    CHECK(corpus[p.subject_b].scans.size() > static_cast<size_t>(p.scan_b));
  }
  CHECK(positives == 50);
}

TEST_CASE("sample_pairs: unsatisfiable balance names the deficient class") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());
  std::mt19937_64 rng(5);

  std::vector<SubjectRecord<float>> single_subject{corpus[0]};
  CHECK_THROWS_WITH_AS(sample_pairs(single_subject, 4, rng),
                       doctest::Contains("different-subject"), Error);

  std::vector<SubjectRecord<float>> single_scans;
  for (const auto& rec : corpus) {
    SubjectRecord<float> r;
    r.subject_id = rec.subject_id;
    r.scans.push_back(rec.scans[0]);
    single_scans.push_back(std::move(r));
  }
  CHECK_THROWS_WITH_AS(sample_pairs(single_scans, 4, rng),
                       doctest::Contains("same-subject"), Error);
}

TEST_CASE("one training step is deterministic in the seed") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());
  auto cfg = tiny_config();
  Trainer<float> a(cfg, corpus), b(cfg, corpus);
  CHECK(hashes(a).g == hashes(b).g);
  auto ra = a.step();
  auto rb = b.step();
  CHECK(ra.gs.total == rb.gs.total);
  CHECK(ra.d_objective == rb.d_objective);
  auto ha = hashes(a), hb = hashes(b);
  CHECK(ha.g == hb.g);
  CHECK(ha.s == hb.s);
  CHECK(ha.d == hb.d);
}

TEST_CASE("half-step isolation via parameter hashing") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());

  SUBCASE("full config updates all three networks") {
    Trainer<float> t(tiny_config(), corpus);
    auto before = hashes(t);
    t.step();
    auto after = hashes(t);
    CHECK(before.g != after.g);
    CHECK(before.s != after.s);
    CHECK(before.d != after.d);
  }
  SUBCASE("lambda1 = 0 leaves the discriminator untouched") {
    auto cfg = tiny_config();
    cfg.weights.lambda1 = 0;
    Trainer<float> t(cfg, corpus);
    auto before = hashes(t);
    t.step();
    auto after = hashes(t);
    CHECK(before.d == after.d);
    CHECK(before.g != after.g);
    CHECK(before.s != after.s);
  }
  SUBCASE("freeze_generator leaves the generator untouched") {
    auto cfg = tiny_config();
    cfg.freeze_generator = true;
    Trainer<float> t(cfg, corpus);
    auto before = hashes(t);
    t.step();
    auto after = hashes(t);
    CHECK(before.g == after.g);
    CHECK(before.s != after.s);
  }
}

TEST_CASE("all lambdas 0 with frozen identity generator equals supervised training") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());

  auto proxy_cfg = tiny_config();
  proxy_cfg.weights = LossWeights{0, 0, 0, 0};
  proxy_cfg.freeze_generator = true;
  Trainer<float> proxied(proxy_cfg, corpus);
  // zero the frozen generator's rigid key component so the warp is the
  // exact identity regardless of the drawn keys
  for (Param<float>* p : proxied.generator().params().all())
    if (p->name.find("shift") != std::string::npos) p->value.setZero();

  auto plain_cfg = tiny_config();
  plain_cfg.proxy = false;
  Trainer<float> supervised(plain_cfg, corpus);

  auto rp = proxied.step();
  auto rs = supervised.step();
  CHECK(rp.gs.seg == rs.gs.seg);
  CHECK(hashes(proxied).s == hashes(supervised).s);
}

TEST_CASE("supervised segmentation loss decreases over 10 epochs") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());
  auto cfg = tiny_config();
  cfg.proxy = false;
  cfg.adam.learning_rate = 1e-3;  // tiny net and few steps; default 1e-4 barely moves
  Trainer<float> t(cfg, corpus);
  const int steps_per_epoch = 4;
  double first = 0, last = 0;
  for (int e = 0; e < 10; ++e) {
    double sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s) sum += t.step().gs.seg;
    if (e == 0) first = sum / steps_per_epoch;
    if (e == 9) last = sum / steps_per_epoch;
  }
  INFO("first ", first, " last ", last);
  CHECK(last < first);
}

TEST_CASE("non-finite loss aborts the step and names the term") {
  auto corpus = synthesize_corpus<float>(tiny_phantom());
  Trainer<float> t(tiny_config(), corpus);
  auto params = t.segmenter().params().all();
  params[0]->value[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(t.step(), doctest::Contains("non-finite"), Error);
}

TEST_CASE("apply_ablation zeroes exactly one weight") {
  TrainConfig cfg;
  apply_ablation(cfg, "inv");
  CHECK(cfg.weights.lambda2 == 0);
  CHECK(cfg.weights.lambda3 == 10);
  apply_ablation(cfg, "smt");
  CHECK(cfg.weights.lambda3 == 0);
  apply_ablation(cfg, "div");
  CHECK(cfg.weights.lambda4 == 0);
  CHECK(cfg.weights.lambda1 == 0.5);
  CHECK_THROWS_WITH_AS(apply_ablation(cfg, "seg"), doctest::Contains("unknown ablation"), Error);
}

TEST_CASE("config JSON round trip") {
  TrainConfig cfg = tiny_config();
  cfg.weights.lambda3 = 7.5;
  cfg.epochs = 42;
  cfg.proxy = false;
  nlohmann::json j = cfg;
  TrainConfig back = j.get<TrainConfig>();
  CHECK(back.net == cfg.net);
  CHECK(back.weights.lambda3 == 7.5);
  CHECK(back.epochs == 42);
  CHECK(back.proxy == false);
  CHECK(back.seed == cfg.seed);
}

TEST_CASE("smoke run: 2 epochs write a log and a loadable complete checkpoint") {
  namespace fs = std::filesystem;
  auto corpus = synthesize_corpus<float>(tiny_phantom());
  auto cfg = tiny_config();
  cfg.epochs = 2;
  cfg.log_path = "trainer_smoke.jsonl";
  cfg.checkpoint_dir = "trainer_smoke_ckpt";
  Trainer<float> t(cfg, corpus);
  t.run();

  std::ifstream log(cfg.log_path);
  REQUIRE(log.good());
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    auto rec = nlohmann::json::parse(line);
    CHECK(rec.at("epoch").get<int>() == ++lines);
    for (const char* key : {"seg", "adv", "inv", "smt", "div", "total"})
      CHECK(std::isfinite(rec.at(key).get<double>()));
  }
  CHECK(lines == 2);

  Trainer<float> fresh(cfg, corpus);
  fresh.load_state(cfg.checkpoint_dir);
  CHECK(hashes(fresh).g == hashes(t).g);
  CHECK(hashes(fresh).s == hashes(t).s);
  CHECK(hashes(fresh).d == hashes(t).d);
  CHECK(fresh.epoch() == 2);

  // incomplete checkpoint: a missing component file is reported
  fs::remove(fs::path(cfg.checkpoint_dir) / "optimizer.bin");
  Trainer<float> broken(cfg, corpus);
  CHECK_THROWS_WITH_AS(broken.load_state(cfg.checkpoint_dir), doctest::Contains("incomplete"),
                       Error);

  fs::remove(cfg.log_path);
  fs::remove_all(cfg.checkpoint_dir);
}

TEST_CASE("resume from a saved state reproduces the uninterrupted run") {
  namespace fs = std::filesystem;
  auto corpus = synthesize_corpus<float>(tiny_phantom());

  auto cfg3 = tiny_config();
  cfg3.epochs = 3;
  Trainer<float> straight(cfg3, corpus);
  straight.run();

  auto cfg2 = tiny_config();
  cfg2.epochs = 2;
  cfg2.checkpoint_dir = "trainer_resume_ckpt";
  Trainer<float> part(cfg2, corpus);
  part.run();

  Trainer<float> resumed(cfg3, corpus);
  resumed.load_state("trainer_resume_ckpt");
  CHECK(resumed.epoch() == 2);
  resumed.run();

  CHECK(hashes(resumed).g == hashes(straight).g);
  CHECK(hashes(resumed).s == hashes(straight).s);
  CHECK(hashes(resumed).d == hashes(straight).d);
  fs::remove_all("trainer_resume_ckpt");
}
