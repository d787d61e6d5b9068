#pragma once

#include "pxseg/io.hpp"
#include "pxseg/losses.hpp"
#include "pxseg/ops.hpp"

#include <json.hpp>

#include <deque>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace pxseg {

template <class S>
struct Param {
  std::string name;
  VecX<S> value;
  VecX<S> grad;  // persistent accumulator, zeroed by the optimizer step
};

template <class S>
class ParamStore {
 public:
  Param<S>& add(const std::string& name, long size) {
    params_.push_back(Param<S>{name, VecX<S>::Zero(size), VecX<S>::Zero(size)});
    return params_.back();
  }

  std::vector<Param<S>*> all() {
    std::vector<Param<S>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  std::vector<const Param<S>*> all() const {
    std::vector<const Param<S>*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  Param<S>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  long total_size() const {
    long n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::deque<Param<S>> params_;  // stable addresses
};

/// Binds a network's parameters into a graph for one forward pass. With
/// trainable=false the parameters enter as constants and backward stops there.
template <class S>
class Binder {
 public:
  Binder(Graph<S>& g, bool trainable) : g_(g), trainable_(trainable) {}

  Var operator()(Param<S>& p) {
    typename Graph<S>::Shape shape{static_cast<int>(p.value.size()), {1, 1, 1}};
    Var v = trainable_ ? g_.leaf(shape, p.value) : g_.constant(shape, p.value);
    if (trainable_) bound_.push_back({&p, v});
    return v;
  }

  /// After backward: adds node gradients into the persistent accumulators.
  void collect() {
    for (auto& [p, v] : bound_)
      if (g_.has_grad(v.id)) p->grad += g_.grad(v.id);
  }

 private:
  Graph<S>& g_;
  bool trainable_;
  std::vector<std::pair<Param<S>*, Var>> bound_;
};

namespace init {

template <class S>
void he_normal(VecX<S>& v, long fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (long i = 0; i < v.size(); ++i) v[i] = static_cast<S>(dist(rng));
}

template <class S>
void normal(VecX<S>& v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (long i = 0; i < v.size(); ++i) v[i] = static_cast<S>(dist(rng));
}

}  // namespace init

/// conv3d + relu twice.
template <class S>
struct ConvBlock {
  Param<S>*w1, *b1, *w2, *b2;
  int cin, cout;

  ConvBlock(ParamStore<S>& store, const std::string& name, int cin_, int cout_,
            std::mt19937_64& rng)
      : cin(cin_), cout(cout_) {
    w1 = &store.add(name + ".conv1.weight", static_cast<long>(cout) * cin * 27);
    b1 = &store.add(name + ".conv1.bias", cout);
    w2 = &store.add(name + ".conv2.weight", static_cast<long>(cout) * cout * 27);
    b2 = &store.add(name + ".conv2.bias", cout);
    init::he_normal(w1->value, static_cast<long>(cin) * 27, rng);
    init::he_normal(w2->value, static_cast<long>(cout) * 27, rng);
  }

  Var forward(Graph<S>& g, Binder<S>& bind, Var x) const {
    Var h = relu(g, conv3d(g, x, bind(*w1), bind(*b1), cout));
    return relu(g, conv3d(g, h, bind(*w2), bind(*b2), cout));
  }
};

inline Dims3 required_padded_dims(Dims3 dims, int multiple) {
  auto up = [multiple](int x) { return ((x + multiple - 1) / multiple) * multiple; };
  return {up(dims.H), up(dims.W), up(dims.D)};
}

inline void check_pool_divisibility(Dims3 dims, int levels) {
  const int multiple = 1 << levels;
  if (dims.H % multiple || dims.W % multiple || dims.D % multiple) {
    const Dims3 padded = required_padded_dims(dims, multiple);
    throw Error("dims " + dims.str() + " not divisible by " + std::to_string(multiple) +
                "; pad to " + padded.str());
  }
}

/// Network geometry shared by G and S: two pooling levels with channel
/// doubling from `base`.
struct NetConfig {
  Dims3 dims{24, 32, 28};
  int classes = 6;
  int key_length = 16;
  int base_channels = 8;
  double flow_max_displacement = 8.0;  // voxels, tanh-bounded
  int pool_levels = 2;

  bool operator==(const NetConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"dims", {c.dims.H, c.dims.W, c.dims.D}}, {"classes", c.classes},
       {"key_length", c.key_length},            {"base_channels", c.base_channels},
       {"flow_max_displacement", c.flow_max_displacement},
       {"pool_levels", c.pool_levels}};
}
inline void from_json(const nlohmann::json& j, NetConfig& c) {
  auto d = j.at("dims");
  c.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  j.at("classes").get_to(c.classes);
  j.at("key_length").get_to(c.key_length);
  j.at("base_channels").get_to(c.base_channels);
  j.at("flow_max_displacement").get_to(c.flow_max_displacement);
  j.at("pool_levels").get_to(c.pool_levels);
}

/// Transformation generator: U-Net over the input image with a key path that
/// upscales the private key to every decoder resolution. Two heads emit the
/// forward and inverse flow fields, tanh-bounded and zero-initialized so the
/// initial transform is the identity.
template <class S>
class GeneratorNet {
 public:
  explicit GeneratorNet(const NetConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        enc0_(store_, "enc0", 1, c0(), rng),
        enc1_(store_, "enc1", c0(), c1(), rng),
        bott_(store_, "bott", c1(), c2(), rng),
        dec1_(store_, "dec1", c1() + c1() + kKeyChannels, c1(), rng),
        dec0_(store_, "dec0", c0() + c0() + kKeyChannels, c0(), rng) {
    const Dims3 coarse = coarse_dims();
    key_fc_w_ = &store_.add("key.project.weight",
                            static_cast<long>(kKeyChannels) * coarse.voxels() * cfg.key_length);
    key_fc_b_ = &store_.add("key.project.bias", static_cast<long>(kKeyChannels) * coarse.voxels());
    init::he_normal(key_fc_w_->value, cfg.key_length, rng);
    key_up1_w_ = &store_.add("key.up1.weight", static_cast<long>(kKeyChannels) * kKeyChannels * 8);
    key_up1_b_ = &store_.add("key.up1.bias", kKeyChannels);
    key_up0_w_ = &store_.add("key.up0.weight", static_cast<long>(kKeyChannels) * kKeyChannels * 8);
    key_up0_b_ = &store_.add("key.up0.bias", kKeyChannels);
    init::he_normal(key_up1_w_->value, kKeyChannels, rng);
    init::he_normal(key_up0_w_->value, kKeyChannels, rng);
    up1_w_ = &store_.add("up1.weight", static_cast<long>(c2() + kKeyChannels) * c1() * 8);
    up1_b_ = &store_.add("up1.bias", c1());
    up0_w_ = &store_.add("up0.weight", static_cast<long>(c1()) * c0() * 8);
    up0_b_ = &store_.add("up0.bias", c0());
    init::he_normal(up1_w_->value, c2() + kKeyChannels, rng);
    init::he_normal(up0_w_->value, c1(), rng);
    // flow heads stay zero-initialized: a zero key gives the identity
    // transform at the start
    head_fwd_w_ = &store_.add("head.forward.weight", static_cast<long>(3) * c0() * 27);
    head_fwd_b_ = &store_.add("head.forward.bias", 3);
    head_inv_w_ = &store_.add("head.inverse.weight", static_cast<long>(3) * c0() * 27);
    head_inv_b_ = &store_.add("head.inverse.bias", 3);
    // Rigid displacement component: a per-axis pre-squash offset linear in
    // the key, added to the head output. A spatially constant displacement
    // is free under the smoothness penalty yet (for independent keys)
    // decorrelates encodings of the same scan, so it is the natural carrier
    // of key diversity; routed through the spatial convolutions instead, the
    // gradient stalls where the smoothness subgradient outweighs the
    // diversity gradient, which vanishes at key-invariance. The small
    // nonzero init breaks that symmetry.
    shift_fwd_w_ = &store_.add("head.forward.shift", static_cast<long>(3) * cfg.key_length);
    shift_inv_w_ = &store_.add("head.inverse.shift", static_cast<long>(3) * cfg.key_length);
    init::normal(shift_fwd_w_->value, 0.01, rng);
    init::normal(shift_inv_w_->value, 0.01, rng);
  }

  /// x: (1, dims) node, key: length-M vector node. Returns (f, f_inv).
  std::pair<Var, Var> forward(Graph<S>& g, Binder<S>& bind, Var x, Var key) const {
    require(g.shape(x).dims == cfg_.dims, "generator: input dims " + g.shape(x).dims.str() +
            " != configured " + cfg_.dims.str());
    require(g.value(key).size() == cfg_.key_length, "generator: key length mismatch");
    check_pool_divisibility(cfg_.dims, cfg_.pool_levels);

    Var e0 = enc0_.forward(g, bind, x);
    Var e1 = enc1_.forward(g, bind, maxpool2(g, e0));
    Var b = bott_.forward(g, bind, maxpool2(g, e1));

    // key path: project to the coarsest grid, then transpose-convolve up
    const Dims3 coarse = coarse_dims();
    Var kc = fc(g, key, bind(*key_fc_w_), bind(*key_fc_b_),
                static_cast<int>(static_cast<long>(kKeyChannels) * coarse.voxels()));
    Var k2 = relu(g, reshape(g, kc, {kKeyChannels, coarse}));
    Var k1 = relu(g, conv_transpose3d(g, k2, bind(*key_up1_w_), bind(*key_up1_b_), kKeyChannels));
    Var k0 = relu(g, conv_transpose3d(g, k1, bind(*key_up0_w_), bind(*key_up0_b_), kKeyChannels));

    Var cat2 = concat_channels(g, {b, k2});
    Var u1 = relu(g, conv_transpose3d(g, cat2, bind(*up1_w_), bind(*up1_b_), c1()));
    Var d1 = dec1_.forward(g, bind, concat_channels(g, {u1, e1, k1}));
    Var u0 = relu(g, conv_transpose3d(g, d1, bind(*up0_w_), bind(*up0_b_), c0()));
    Var d0 = dec0_.forward(g, bind, concat_channels(g, {u0, e0, k0}));

    const S dmax = static_cast<S>(cfg_.flow_max_displacement);
    Var zero3 = g.vector_constant(VecX<S>::Zero(3));
    Var s_fwd = fc(g, key, bind(*shift_fwd_w_), zero3, 3);
    Var s_inv = fc(g, key, bind(*shift_inv_w_), zero3, 3);
    Var f = scaled_tanh(
        g, conv3d(g, d0, bind(*head_fwd_w_), add(g, bind(*head_fwd_b_), s_fwd), 3), dmax);
    Var f_inv = scaled_tanh(
        g, conv3d(g, d0, bind(*head_inv_w_), add(g, bind(*head_inv_b_), s_inv), 3), dmax);
    return {f, f_inv};
  }

  const NetConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

 private:
  int c0() const { return cfg_.base_channels; }
  int c1() const { return cfg_.base_channels * 2; }
  int c2() const { return cfg_.base_channels * 4; }
  Dims3 coarse_dims() const {
    return {cfg_.dims.H / 4, cfg_.dims.W / 4, cfg_.dims.D / 4};
  }

  static constexpr int kKeyChannels = 8;

  NetConfig cfg_;
  ParamStore<S> store_;
  ConvBlock<S> enc0_, enc1_, bott_, dec1_, dec0_;
  Param<S>*key_fc_w_, *key_fc_b_, *key_up1_w_, *key_up1_b_, *key_up0_w_, *key_up0_b_;
  Param<S>*up1_w_, *up1_b_, *up0_w_, *up0_b_;
  Param<S>*head_fwd_w_, *head_fwd_b_, *head_inv_w_, *head_inv_b_;
  Param<S>*shift_fwd_w_, *shift_inv_w_;
};

/// 3-D U-Net segmenter with per-voxel softmax output.
template <class S>
class SegmentationNet {
 public:
  explicit SegmentationNet(const NetConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        enc0_(store_, "enc0", 1, c0(), rng),
        enc1_(store_, "enc1", c0(), c1(), rng),
        bott_(store_, "bott", c1(), c2(), rng),
        dec1_(store_, "dec1", c1() + c1(), c1(), rng),
        dec0_(store_, "dec0", c0() + c0(), c0(), rng) {
    up1_w_ = &store_.add("up1.weight", static_cast<long>(c2()) * c1() * 8);
    up1_b_ = &store_.add("up1.bias", c1());
    up0_w_ = &store_.add("up0.weight", static_cast<long>(c1()) * c0() * 8);
    up0_b_ = &store_.add("up0.bias", c0());
    init::he_normal(up1_w_->value, c2(), rng);
    init::he_normal(up0_w_->value, c1(), rng);
    out_w_ = &store_.add("out.weight", static_cast<long>(cfg.classes) * c0() * 27);
    out_b_ = &store_.add("out.bias", cfg.classes);
    init::he_normal(out_w_->value, static_cast<long>(c0()) * 27, rng);
  }

  /// x: (1, dims) node. Returns (classes, dims) softmax scores.
  Var forward(Graph<S>& g, Binder<S>& bind, Var x) const {
    require(g.shape(x).dims == cfg_.dims, "segmenter: input dims " + g.shape(x).dims.str() +
            " != configured " + cfg_.dims.str());
    check_pool_divisibility(cfg_.dims, cfg_.pool_levels);
    Var e0 = enc0_.forward(g, bind, x);
    Var e1 = enc1_.forward(g, bind, maxpool2(g, e0));
    Var b = bott_.forward(g, bind, maxpool2(g, e1));
    Var u1 = relu(g, conv_transpose3d(g, b, bind(*up1_w_), bind(*up1_b_), c1()));
    Var d1 = dec1_.forward(g, bind, concat_channels(g, {u1, e1}));
    Var u0 = relu(g, conv_transpose3d(g, d1, bind(*up0_w_), bind(*up0_b_), c0()));
    Var d0 = dec0_.forward(g, bind, concat_channels(g, {u0, e0}));
    return softmax_channels(g, conv3d(g, d0, bind(*out_w_), bind(*out_b_), cfg_.classes));
  }

  const NetConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

 private:
  int c0() const { return cfg_.base_channels; }
  int c1() const { return cfg_.base_channels * 2; }
  int c2() const { return cfg_.base_channels * 4; }

  NetConfig cfg_;
  ParamStore<S> store_;
  ConvBlock<S> enc0_, enc1_, bott_, dec1_, dec0_;
  Param<S>*up1_w_, *up1_b_, *up0_w_, *up0_b_, *out_w_, *out_b_;
};

/// Siamese same-subject discriminator over soft segmentation maps. The
/// absolute-difference fusion of the two embeddings makes D symmetric.
template <class S>
class SiameseDiscriminator {
 public:
  explicit SiameseDiscriminator(const NetConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    conv1_w_ = &store_.add("conv1.weight", static_cast<long>(c0()) * cfg.classes * 27);
    conv1_b_ = &store_.add("conv1.bias", c0());
    conv2_w_ = &store_.add("conv2.weight", static_cast<long>(c1()) * c0() * 27);
    conv2_b_ = &store_.add("conv2.bias", c1());
    // no bias on the last conv: it adds the same per-channel constant to
    // both embeddings, so the |e_a - e_b| fusion cannot see it
    conv3_w_ = &store_.add("conv3.weight", static_cast<long>(c2()) * c1() * 27);
    init::he_normal(conv1_w_->value, static_cast<long>(cfg.classes) * 27, rng);
    init::he_normal(conv2_w_->value, static_cast<long>(c0()) * 27, rng);
    init::he_normal(conv3_w_->value, static_cast<long>(c1()) * 27, rng);
    fc1_w_ = &store_.add("fc1.weight", static_cast<long>(16) * embed_dim());
    fc1_b_ = &store_.add("fc1.bias", 16);
    fc2_w_ = &store_.add("fc2.weight", 16);
    fc2_b_ = &store_.add("fc2.bias", 1);
    init::he_normal(fc1_w_->value, embed_dim(), rng);
    init::he_normal(fc2_w_->value, 16, rng);
  }

  /// Shared-weight encoder: (classes, dims) -> embedding, the flattened
  /// coarsest feature map. Pooling it down to channel means would leave the
  /// embedding nearly blind to where structures sit — and rigid shifts are
  /// exactly the cheapest deformation available to the generator, since a
  /// spatially constant flow pays no smoothness penalty. Re-identification
  /// is a question of geometry, so position must survive into the fusion.
  Var embed(Graph<S>& g, Binder<S>& bind, Var seg) const {
    require(g.shape(seg).channels == cfg_.classes, "discriminator: class count mismatch");
    require(g.shape(seg).dims == cfg_.dims, "discriminator: dims mismatch");
    Var h = relu(g, conv3d(g, seg, bind(*conv1_w_), bind(*conv1_b_), c0()));
    h = maxpool2(g, h);
    h = relu(g, conv3d(g, h, bind(*conv2_w_), bind(*conv2_b_), c1()));
    h = maxpool2(g, h);
    return relu(g, conv3d(g, h, bind(*conv3_w_), g.vector_constant(VecX<S>::Zero(c2())), c2()));
  }

  /// Probability that both maps belong to the same subject, in (0, 1).
  Var forward(Graph<S>& g, Binder<S>& bind, Var seg_a, Var seg_b) const {
    Var ea = embed(g, bind, seg_a);
    Var eb = embed(g, bind, seg_b);
    Var fused = abs_diff(g, ea, eb);
    Var h = relu(g, fc(g, fused, bind(*fc1_w_), bind(*fc1_b_), 16));
    return sigmoid(g, fc(g, h, bind(*fc2_w_), bind(*fc2_b_), 1));
  }

  const NetConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

 private:
  int c0() const { return cfg_.base_channels; }
  int c1() const { return cfg_.base_channels * 2; }
  int c2() const { return cfg_.base_channels * 4; }

  long embed_dim() const {
    const Dims3 coarse{cfg_.dims.H / 4, cfg_.dims.W / 4, cfg_.dims.D / 4};
    return static_cast<long>(c2()) * coarse.voxels();
  }

  NetConfig cfg_;
  ParamStore<S> store_;
  Param<S>*conv1_w_, *conv1_b_, *conv2_w_, *conv2_b_, *conv3_w_;
  Param<S>*fc1_w_, *fc1_b_, *fc2_w_, *fc2_b_;
};

// ---- convenience inference wrappers on frozen snapshots ----

template <class S>
std::pair<FlowField<S>, FlowField<S>> generate_flows(const GeneratorNet<S>& net,
                                                     const Volume<S>& x,
                                                     const PrivateKey<S>& key) {
  Graph<S> g;
  Binder<S> bind(g, false);
  Var xv = g.constant({1, x.dims}, x.data);
  Var kv = g.vector_constant(key.values);
  auto [f, f_inv] = net.forward(g, bind, xv, kv);
  return {FlowField<S>(x.dims, g.value(f)), FlowField<S>(x.dims, g.value(f_inv))};
}

template <class S>
SegMap<S> segment(const SegmentationNet<S>& net, const Volume<S>& x) {
  Graph<S> g;
  Binder<S> bind(g, false);
  Var out = net.forward(g, bind, g.constant({1, x.dims}, x.data));
  return SegMap<S>(x.dims, net.config().classes, g.value(out));
}

template <class S>
S discriminate(const SiameseDiscriminator<S>& net, const SegMap<S>& a, const SegMap<S>& b) {
  require(a.dims == b.dims && a.classes == b.classes, "discriminate: shape mismatch");
  Graph<S> g;
  Binder<S> bind(g, false);
  typename Graph<S>::Shape shape{a.classes, a.dims};
  Var out = net.forward(g, bind, g.constant(shape, a.soft), g.constant(shape, b.soft));
  return g.scalar(out);
}

// ---- checkpoints: json descriptor + little-endian float32 blobs ----

namespace ckpt {

constexpr char kMagic[8] = {'P', 'X', 'S', 'G', 'C', 'K', 'P', 'T'};

template <class S>
std::vector<uint8_t> pack(const nlohmann::json& arch, const ParamStore<S>& store) {
  nlohmann::json desc;
  desc["format_version"] = 1;
  desc["arch"] = arch;
  desc["params"] = nlohmann::json::array();
  long offset = 0;
  for (const Param<S>* p : store.all()) {
    desc["params"].push_back({{"name", p->name}, {"size", p->value.size()}, {"offset", offset}});
    offset += p->value.size();
  }
  const std::string js = desc.dump();
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  wire::put_u32(out, static_cast<uint32_t>(js.size()));
  out.insert(out.end(), js.begin(), js.end());
  for (const Param<S>* p : store.all()) wire::put_f32(out, p->value);
  return out;
}

struct Parsed {
  nlohmann::json arch;
  nlohmann::json params;
  std::vector<float> blob;
};

inline Parsed parse(const std::vector<uint8_t>& bytes) {
  wire::Reader r(bytes.data(), bytes.size());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw Error("checkpoint: bad magic");
  const uint32_t js_len = r.u32();
  std::string js(js_len, '\0');
  r.bytes(js.data(), js_len);
  Parsed out;
  nlohmann::json desc = nlohmann::json::parse(js);
  if (desc.at("format_version").get<int>() != 1) throw Error("checkpoint: unsupported version");
  out.arch = desc.at("arch");
  out.params = desc.at("params");
  out.blob.resize(r.remaining() / 4);
  r.bytes(out.blob.data(), out.blob.size() * 4);
  r.expect_end();
  return out;
}

template <class S>
void unpack_into(const Parsed& parsed, ParamStore<S>& store) {
  for (const auto& entry : parsed.params) {
    const std::string name = entry.at("name").get<std::string>();
    const long size = entry.at("size").get<long>();
    const long offset = entry.at("offset").get<long>();
    Param<S>* p = store.find(name);
    if (p == nullptr) throw Error("checkpoint: unknown parameter " + name);
    if (p->value.size() != size)
      throw Error("checkpoint: size mismatch for " + name + ": file has " + std::to_string(size) +
                  ", network expects " + std::to_string(p->value.size()));
    if (offset + size > static_cast<long>(parsed.blob.size()))
      throw Error("checkpoint: blob too short for " + name);
    for (long i = 0; i < size; ++i) p->value[i] = static_cast<S>(parsed.blob[offset + i]);
  }
}

}  // namespace ckpt

template <class S, class Net>
void save_checkpoint(const std::string& path, const std::string& kind, const Net& net) {
  nlohmann::json arch;
  arch["kind"] = kind;
  arch["config"] = net.config();
  write_file(path, ckpt::pack<S>(arch, net.params()));
}

template <class S, class Net>
void load_checkpoint(const std::string& path, const std::string& kind, Net& net) {
  auto parsed = ckpt::parse(read_file(path));
  if (parsed.arch.at("kind").get<std::string>() != kind)
    throw Error("checkpoint: expected kind '" + kind + "', file holds '" +
                parsed.arch.at("kind").get<std::string>() + "'");
  NetConfig file_cfg = parsed.arch.at("config").get<NetConfig>();
  if (!(file_cfg == net.config()))
    throw Error("checkpoint: architecture descriptor does not match the configured network");
  ckpt::unpack_into(parsed, net.params());
}

}  // namespace pxseg
