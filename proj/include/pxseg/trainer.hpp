#pragma once

#include "pxseg/networks.hpp"
#include "pxseg/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace pxseg {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    require(learning_rate > 0, "AdamConfig: learning rate must be positive");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "AdamConfig: betas must be in [0,1)");
  }
};

template <class S>
class Adam {
 public:
  Adam(ParamStore<S>& store, AdamConfig cfg) : store_(&store), cfg_(cfg) {
    cfg.validate();
    for (Param<S>* p : store.all()) {
      m_.push_back(VecX<S>::Zero(p->value.size()));
      v_.push_back(VecX<S>::Zero(p->value.size()));
    }
  }

  /// Clips the store-wide gradient norm, applies one Adam update, zeroes the
  /// accumulators.
  void step(double clip_norm) {
    auto params = store_->all();
    double norm_sq = 0;
    for (Param<S>* p : params) norm_sq += static_cast<double>(p->grad.square().sum());
    const double norm = std::sqrt(norm_sq);
    const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S lr = static_cast<S>(cfg_.learning_rate / bc1);
    const S eps = static_cast<S>(cfg_.eps);
    for (size_t i = 0; i < params.size(); ++i) {
      VecX<S> grad = params[i]->grad * static_cast<S>(scale);
      m_[i] = b1 * m_[i] + (S(1) - b1) * grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * grad.square();
      params[i]->value -= lr * m_[i] / ((v_[i] / static_cast<S>(bc2)).sqrt() + eps);
      params[i]->grad.setZero();
    }
  }

  void zero_grads() {
    for (Param<S>* p : store_->all()) p->grad.setZero();
  }

  long steps_taken() const { return t_; }

  void serialize(std::vector<uint8_t>& out) const {
    wire::put_u32(out, static_cast<uint32_t>(t_));
    for (const auto& m : m_) wire::put_f32(out, m);
    for (const auto& v : v_) wire::put_f32(out, v);
  }
  void deserialize(wire::Reader& r) {
    t_ = r.u32();
    for (auto& m : m_) m = wire::get_f32<S>(r, m.size());
    for (auto& v : v_) v = wire::get_f32<S>(r, v.size());
  }

 private:
  ParamStore<S>* store_;
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<VecX<S>> m_, v_;
};

/// FNV-1a over parameter bytes; pins "this half-step did not touch that
/// network" assertions.
template <class S>
uint64_t param_hash(const ParamStore<S>& store) {
  uint64_t h = 1469598103934665603ULL;
  for (const Param<S>* p : store.all()) {
    const auto* bytes = reinterpret_cast<const uint8_t*>(p->value.data());
    for (long i = 0; i < p->value.size() * static_cast<long>(sizeof(S)); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

struct TrainConfig {
  NetConfig net;
  LossWeights weights;
  AdamConfig adam;
  int epochs = 100;
  int samples_per_step = 2;  // (x, y) draws feeding seg/adv/inv/smt/div
  int pairs_per_step = 4;    // labeled ground-truth pairs feeding D
  double grad_clip_norm = 5.0;
  bool proxy = true;            // false: plain supervised segmenter, no G/D
  bool freeze_generator = false;
  uint64_t seed = 1;
  std::string log_path;        // JSONL metrics; empty = no log
  std::string checkpoint_dir;  // final state; empty = no checkpoints

  void validate() const {
    weights.validate();
    adam.validate();
    require(epochs >= 1, "TrainConfig: epochs must be >= 1");
    require(samples_per_step >= 1, "TrainConfig: need at least 1 sample per step");
    require(!proxy || weights.lambda1 == 0 || pairs_per_step >= 2,
            "TrainConfig: adversarial training needs at least 2 pairs per step");
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3},
       {"lambda4", w.lambda4}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
  j.at("lambda1").get_to(w.lambda1);
  j.at("lambda2").get_to(w.lambda2);
  j.at("lambda3").get_to(w.lambda3);
  j.at("lambda4").get_to(w.lambda4);
}
inline void to_json(nlohmann::json& j, const AdamConfig& a) {
  j = {{"learning_rate", a.learning_rate}, {"beta1", a.beta1}, {"beta2", a.beta2},
       {"eps", a.eps}};
}
inline void from_json(const nlohmann::json& j, AdamConfig& a) {
  j.at("learning_rate").get_to(a.learning_rate);
  j.at("beta1").get_to(a.beta1);
  j.at("beta2").get_to(a.beta2);
  j.at("eps").get_to(a.eps);
}
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"net", c.net},
       {"weights", c.weights},
       {"adam", c.adam},
       {"epochs", c.epochs},
       {"samples_per_step", c.samples_per_step},
       {"pairs_per_step", c.pairs_per_step},
       {"grad_clip_norm", c.grad_clip_norm},
       {"proxy", c.proxy},
       {"freeze_generator", c.freeze_generator},
       {"seed", c.seed},
       {"log_path", c.log_path},
       {"checkpoint_dir", c.checkpoint_dir}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("net").get_to(c.net);
  j.at("weights").get_to(c.weights);
  j.at("adam").get_to(c.adam);
  j.at("epochs").get_to(c.epochs);
  j.at("samples_per_step").get_to(c.samples_per_step);
  j.at("pairs_per_step").get_to(c.pairs_per_step);
  j.at("grad_clip_norm").get_to(c.grad_clip_norm);
  j.at("proxy").get_to(c.proxy);
  j.at("freeze_generator").get_to(c.freeze_generator);
  j.at("seed").get_to(c.seed);
  if (j.contains("log_path")) j.at("log_path").get_to(c.log_path);
  if (j.contains("checkpoint_dir")) j.at("checkpoint_dir").get_to(c.checkpoint_dir);
}

/// Zeroes the weight of one loss term; names follow the ablation study.
inline void apply_ablation(TrainConfig& cfg, const std::string& term) {
  if (term == "inv") cfg.weights.lambda2 = 0;
  else if (term == "smt") cfg.weights.lambda3 = 0;
  else if (term == "div") cfg.weights.lambda4 = 0;
  else throw Error("unknown ablation '" + term + "'; expected inv, smt, or div");
}

/// One labeled discriminator pair: scan indices into the corpus.
struct PairSample {
  int subject_a = 0, scan_a = 0;
  int subject_b = 0, scan_b = 0;
  int label = 0;  // 1 iff same subject
};

/// Draws `count` pairs, half same-subject (different scans) and half
/// different-subject.
template <class S>
std::vector<PairSample> sample_pairs(const std::vector<SubjectRecord<S>>& corpus, int count,
                                     std::mt19937_64& rng) {
  require(count >= 1, "sample_pairs: count must be >= 1");
  std::vector<int> multi_scan;
  for (size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].scans.size() >= 2) multi_scan.push_back(static_cast<int>(i));
  const int positives = count / 2 + count % 2;
  const int negatives = count - positives;
  if (positives > 0 && multi_scan.empty())
    throw Error("sample_pairs: same-subject pairs unsatisfiable, no subject has 2+ scans");
  if (negatives > 0 && corpus.size() < 2)
    throw Error("sample_pairs: different-subject pairs unsatisfiable, corpus has 1 subject");

  std::vector<PairSample> out;
  auto pick = [&rng](size_t n) {
    return static_cast<int>(std::uniform_int_distribution<size_t>(0, n - 1)(rng));
  };
  for (int i = 0; i < positives; ++i) {
    PairSample p;
    p.subject_a = p.subject_b = multi_scan[pick(multi_scan.size())];
    const size_t scans = corpus[p.subject_a].scans.size();
    p.scan_a = pick(scans);
    do { p.scan_b = pick(scans); } while (p.scan_b == p.scan_a);
    p.label = 1;
    out.push_back(p);
  }
  for (int i = 0; i < negatives; ++i) {
    PairSample p;
    p.subject_a = pick(corpus.size());
    do { p.subject_b = pick(corpus.size()); } while (p.subject_b == p.subject_a);
    p.scan_a = pick(corpus[p.subject_a].scans.size());
    p.scan_b = pick(corpus[p.subject_b].scans.size());
    p.label = 0;
    out.push_back(p);
  }
  return out;
}

struct StepReport {
  LossReport gs;          // generator + segmenter objective terms
  double d_objective = 0; // value D maximizes (0 when D is not trained)
};

template <class S>
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<SubjectRecord<S>> corpus)
      : cfg_(std::move(cfg)),
        corpus_(std::move(corpus)),
        rng_(cfg_.seed),
        gen_(cfg_.net, rng_),
        seg_(cfg_.net, rng_),
        disc_(cfg_.net, rng_),
        opt_g_(gen_.params(), cfg_.adam),
        opt_s_(seg_.params(), cfg_.adam),
        opt_d_(disc_.params(), cfg_.adam) {
    cfg_.validate();
    require(!corpus_.empty(), "Trainer: empty corpus");
    for (size_t i = 0; i < corpus_.size(); ++i) {
      corpus_[i].validate();
      for (size_t k = 0; k < corpus_[i].scans.size(); ++k) {
        const auto& [vol, segm] = corpus_[i].scans[k];
        require(vol.dims == cfg_.net.dims, "Trainer: scan dims do not match the configured net");
        require(segm.classes == cfg_.net.classes, "Trainer: class count mismatch");
        scan_index_.emplace_back(static_cast<int>(i), static_cast<int>(k));
      }
    }
  }

  StepReport step() {
    std::vector<std::pair<int, int>> batch;
    auto pick = [this](size_t n) {
      return std::uniform_int_distribution<size_t>(0, n - 1)(rng_);
    };
    for (int i = 0; i < cfg_.samples_per_step; ++i)
      batch.push_back(scan_index_[pick(scan_index_.size())]);

    StepReport rep;
    if (cfg_.proxy && cfg_.weights.lambda1 > 0) rep.d_objective = d_half_step(batch);
    rep.gs = gs_half_step(batch);
    ++step_count_;
    return rep;
  }

  /// Epochs of steps with per-epoch JSONL metrics and final checkpoints.
  void run() {
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>((scan_index_.size() + cfg_.samples_per_step - 1) /
                                          cfg_.samples_per_step));
    std::ofstream log;
    if (!cfg_.log_path.empty()) {
      log.open(cfg_.log_path);
      require(log.good(), "Trainer: cannot open log " + cfg_.log_path);
    }
    for (; epoch_ < cfg_.epochs; ) {
      LossReport sum;
      double d_sum = 0;
      for (int s = 0; s < steps_per_epoch; ++s) {
        StepReport rep = step();
        sum.seg += rep.gs.seg;
        sum.adv += rep.gs.adv;
        sum.inv += rep.gs.inv;
        sum.smt += rep.gs.smt;
        sum.div += rep.gs.div;
        sum.total += rep.gs.total;
        d_sum += rep.d_objective;
      }
      ++epoch_;
      if (log.is_open()) {
        nlohmann::json line = {{"epoch", epoch_},
                               {"seg", sum.seg / steps_per_epoch},
                               {"adv", sum.adv / steps_per_epoch},
                               {"inv", sum.inv / steps_per_epoch},
                               {"smt", sum.smt / steps_per_epoch},
                               {"div", sum.div / steps_per_epoch},
                               {"total", sum.total / steps_per_epoch},
                               {"d_objective", d_sum / steps_per_epoch}};
        log << line.dump() << "\n";
        log.flush();
      }
    }
    if (!cfg_.checkpoint_dir.empty()) save_state(cfg_.checkpoint_dir);
  }

  // ---- resumable state: network ckpts + optimizer moments + RNG ----

  void save_state(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_checkpoint<S>((fs::path(dir) / "generator.ckpt").string(), "generator", gen_);
    save_checkpoint<S>((fs::path(dir) / "segmenter.ckpt").string(), "segmenter", seg_);
    save_checkpoint<S>((fs::path(dir) / "discriminator.ckpt").string(), "discriminator", disc_);
    std::vector<uint8_t> opt;
    opt_g_.serialize(opt);
    opt_s_.serialize(opt);
    opt_d_.serialize(opt);
    write_file((fs::path(dir) / "optimizer.bin").string(), opt);
    std::ostringstream rng_text;
    rng_text << rng_;
    nlohmann::json state = {{"format_version", 1},
                            {"epoch", epoch_},
                            {"steps", step_count_},
                            {"rng", rng_text.str()},
                            {"config", cfg_}};
    // state.json written last marks the checkpoint complete
    std::ofstream f((fs::path(dir) / "state.json").string());
    require(f.good(), "save_state: cannot write state.json");
    f << state.dump(2) << "\n";
  }

  void load_state(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f((fs::path(dir) / "state.json").string());
    if (!f.good())
      throw Error("load_state: " + dir + " has no state.json (incomplete checkpoint)");
    nlohmann::json state = nlohmann::json::parse(f);
    if (state.at("format_version").get<int>() != 1)
      throw Error("load_state: unsupported state version");
    for (const char* name : {"generator.ckpt", "segmenter.ckpt", "discriminator.ckpt",
                             "optimizer.bin"})
      if (!fs::exists(fs::path(dir) / name))
        throw Error(std::string("load_state: missing ") + name + " (incomplete checkpoint)");
    load_checkpoint<S>((fs::path(dir) / "generator.ckpt").string(), "generator", gen_);
    load_checkpoint<S>((fs::path(dir) / "segmenter.ckpt").string(), "segmenter", seg_);
    load_checkpoint<S>((fs::path(dir) / "discriminator.ckpt").string(), "discriminator", disc_);
    auto opt = read_file((fs::path(dir) / "optimizer.bin").string());
    wire::Reader r(opt.data(), opt.size());
    opt_g_.deserialize(r);
    opt_s_.deserialize(r);
    opt_d_.deserialize(r);
    r.expect_end();
    epoch_ = state.at("epoch").get<int>();
    step_count_ = state.at("steps").get<long>();
    std::istringstream rng_text(state.at("rng").get<std::string>());
    rng_text >> rng_;
  }

  GeneratorNet<S>& generator() { return gen_; }
  SegmentationNet<S>& segmenter() { return seg_; }
  SiameseDiscriminator<S>& discriminator() { return disc_; }
  const TrainConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  using Shape = typename Graph<S>::Shape;

  VecX<S> draw_key() {
    std::normal_distribution<double> normal(0.0, 1.0);
    VecX<S> k(cfg_.net.key_length);
    for (long i = 0; i < k.size(); ++i) k[i] = static_cast<S>(normal(rng_));
    return k;
  }

  Var mean_terms(Graph<S>& g, const std::vector<Var>& terms) {
    return affine_combine(g, terms,
                          std::vector<S>(terms.size(), S(1) / static_cast<S>(terms.size())));
  }

  double checked(Graph<S>& g, Var v, const char* term) const {
    const double x = static_cast<double>(g.scalar(v));
    if (!std::isfinite(x))
      throw Error(std::string("non-finite ") + term + " loss at epoch " +
                  std::to_string(epoch_) + ", step " + std::to_string(step_count_));
    return x;
  }

  /// D update maximizing the pair cross-entropy plus log D(y_d, y_rec), with
  /// G and S frozen: the discriminator learns to recognize that a deformed
  /// segmentation and its reconstruction are the same subject (they are),
  /// while the generator (below) deforms until it cannot. Returns the
  /// maximized objective value.
  double d_half_step(const std::vector<std::pair<int, int>>& batch) {
    Graph<S> g;
    Binder<S> bd(g, true), frozen(g, false);
    const Shape seg_shape{cfg_.net.classes, cfg_.net.dims};

    std::vector<Var> terms;
    for (const PairSample& pr : sample_pairs(corpus_, cfg_.pairs_per_step, rng_)) {
      // Real pairs are the segmenter's predictions on the paired scans, not
      // the one-hot ground truth. The generated pair below is made of soft
      // segmenter outputs; trained against one-hot reals, D separates the
      // two by sharpness alone and no deformation can ever fool it — the
      // same/different-subject game has to be played on a single map
      // distribution to stay a game about geometry.
      Var xa = g.constant({1, cfg_.net.dims}, corpus_[pr.subject_a].scans[pr.scan_a].first.data);
      Var xb = g.constant({1, cfg_.net.dims}, corpus_[pr.subject_b].scans[pr.scan_b].first.data);
      Var ya = seg_.forward(g, frozen, xa);
      Var yb = seg_.forward(g, frozen, xb);
      terms.push_back(pair_log_likelihood(g, disc_.forward(g, bd, ya, yb), pr.label));
    }
    std::vector<Var> fake_terms;
    for (auto [subj, scan] : batch) {
      Var x = g.constant({1, cfg_.net.dims}, corpus_[subj].scans[scan].first.data);
      auto [f, f_inv] = gen_.forward(g, frozen, x, g.vector_constant(draw_key()));
      Var y_d = seg_.forward(g, frozen, warp_op(g, x, f));
      Var y_rec = warp_op(g, y_d, f_inv);
      fake_terms.push_back(log_prob(g, disc_.forward(g, bd, y_d, y_rec)));
    }
    Var objective = add(g, mean_terms(g, terms), mean_terms(g, fake_terms));
    const double value = checked(g, objective, "discriminator");
    Var loss = mul_scalar(g, objective, S(-1));  // maximize via minimization
    g.backward(loss);
    bd.collect();
    opt_d_.step(cfg_.grad_clip_norm);
    return value;
  }

  /// Joint G + S update on the full objective with D frozen.
  LossReport gs_half_step(const std::vector<std::pair<int, int>>& batch) {
    Graph<S> g;
    Binder<S> bg(g, cfg_.proxy && !cfg_.freeze_generator);
    Binder<S> bs(g, true);
    Binder<S> bs_frozen(g, false);
    Binder<S> bd_frozen(g, false);
    const Shape seg_shape{cfg_.net.classes, cfg_.net.dims};
    const LossWeights& w = cfg_.weights;

    std::vector<Var> seg_t, adv_t, inv_t, smt_t, div_t;
    for (auto [subj, scan] : batch) {
      Var x = g.constant({1, cfg_.net.dims}, corpus_[subj].scans[scan].first.data);
      Var y = g.constant(seg_shape, corpus_[subj].scans[scan].second.soft);
      if (!cfg_.proxy) {
        seg_t.push_back(dice_loss_op(g, seg_.forward(g, bs, x), y));
        continue;
      }
      auto [f, f_inv] = gen_.forward(g, bg, x, g.vector_constant(draw_key()));
      Var x_d = warp_op(g, x, f);
      Var y_d_hat = seg_.forward(g, bs, x_d);
      Var y_hat = warp_op(g, y_d_hat, f_inv);  // reconstructed prediction
      seg_t.push_back(dice_loss_op(g, y_hat, y));
      if (w.lambda1 > 0) {
        // Fooling objective: G lowers D(y_d, y_hat) so the pair no longer
        // reads as same-subject. -log(1 - D) keeps the gradient alive when
        // D is confident, where log D would saturate. Only G receives this
        // gradient: the segmenter is re-run frozen so it cannot learn to
        // corrupt its own predictions as a way of fooling D.
        Var y_d_adv = seg_.forward(g, bs_frozen, x_d);
        Var y_adv = warp_op(g, y_d_adv, f_inv);
        Var fooled = log_one_minus(g, disc_.forward(g, bd_frozen, y_d_adv, y_adv));
        adv_t.push_back(mul_scalar(g, fooled, S(-1)));
      }
      if (w.lambda2 > 0) {
        Var x_rt = warp_op(g, x_d, f_inv);
        Var y_rt = warp_op(g, warp_op(g, y, f), f_inv);
        inv_t.push_back(add(g, ssim_loss_op(g, x, x_rt), dice_loss_op(g, y_rt, y)));
      }
      if (w.lambda3 > 0) smt_t.push_back(smoothness_op(g, f));
      if (w.lambda4 > 0) {
        auto [f2, f2_inv] = gen_.forward(g, bg, x, g.vector_constant(draw_key()));
        Var term = add(g, ssim_loss_op(g, warp_op(g, x, f), warp_op(g, x, f2)),
                       dice_loss_op(g, warp_op(g, y, f), warp_op(g, y, f2)));
        div_t.push_back(term);
      }
    }

    std::vector<Var> means{mean_terms(g, seg_t)};
    std::vector<S> coefs{S(1)};
    LossReport rep;
    rep.seg = checked(g, means[0], "segmentation");
    auto push_term = [&](std::vector<Var>& terms, double coef, const char* name, double& slot) {
      if (terms.empty()) return;
      Var m = mean_terms(g, terms);
      slot = checked(g, m, name);
      means.push_back(m);
      coefs.push_back(static_cast<S>(coef));
    };
    push_term(adv_t, w.lambda1, "adversarial", rep.adv);
    push_term(inv_t, w.lambda2, "invertibility", rep.inv);
    push_term(smt_t, w.lambda3, "smoothness", rep.smt);
    push_term(div_t, -w.lambda4, "diversity", rep.div);

    Var total = affine_combine(g, means, coefs);
    rep.total = checked(g, total, "total");
    g.backward(total);
    bg.collect();
    bs.collect();
    if (cfg_.proxy && !cfg_.freeze_generator) opt_g_.step(cfg_.grad_clip_norm);
    else opt_g_.zero_grads();
    opt_s_.step(cfg_.grad_clip_norm);
    return rep;
  }

  TrainConfig cfg_;
  std::vector<SubjectRecord<S>> corpus_;
  std::vector<std::pair<int, int>> scan_index_;
  std::mt19937_64 rng_;
  GeneratorNet<S> gen_;
  SegmentationNet<S> seg_;
  SiameseDiscriminator<S> disc_;
  Adam<S> opt_g_, opt_s_, opt_d_;
  int epoch_ = 0;
  long step_count_ = 0;
};

}  // namespace pxseg
