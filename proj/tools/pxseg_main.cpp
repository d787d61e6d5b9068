#include "CLI11.hpp"
#include "pxseg/eval.hpp"
#include "pxseg/phantom.hpp"
#include "pxseg/protocol.hpp"
#include "pxseg/trainer.hpp"

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

namespace fs = std::filesystem;
using namespace pxseg;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open: " + path);
  return nlohmann::json::parse(f);
}

NetConfig checkpoint_config(const std::string& path, const std::string& kind) {
  auto parsed = ckpt::parse(read_file(path));
  require(parsed.arch.at("kind").get<std::string>() == kind,
          path + ": expected a " + kind + " checkpoint");
  return parsed.arch.at("config").get<NetConfig>();
}

std::string key_to_hex(const VecX<float>& values) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (long i = 0; i < values.size(); ++i) {
    uint8_t bytes[4];
    std::memcpy(bytes, &values[i], 4);
    for (uint8_t b : bytes) {
      s.push_back(digits[b >> 4]);
      s.push_back(digits[b & 0xf]);
    }
  }
  return s;
}

VecX<float> key_from_hex(const std::string& hex, long expected_length) {
  require(static_cast<long>(hex.size()) == expected_length * 8,
          "key must be " + std::to_string(expected_length * 8) + " hex digits (" +
              std::to_string(expected_length) + " float32 values), got " +
              std::to_string(hex.size()));
  auto nibble = [&](char c) -> uint8_t {
    if (c >= '0' && c <= '9') return static_cast<uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<uint8_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<uint8_t>(c - 'A' + 10);
    throw Error(std::string("invalid hex digit '") + c + "' in key");
  };
  VecX<float> values(expected_length);
  for (long i = 0; i < expected_length; ++i) {
    uint8_t bytes[4];
    for (int b = 0; b < 4; ++b)
      bytes[b] = static_cast<uint8_t>((nibble(hex[i * 8 + 2 * b]) << 4) |
                                      nibble(hex[i * 8 + 2 * b + 1]));
    std::memcpy(&values[i], bytes, 4);
  }
  require(all_finite(values), "key contains non-finite values");
  return values;
}

std::pair<std::string, uint16_t> parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  require(colon != std::string::npos && colon + 1 < s.size(), "endpoint must be addr:port: " + s);
  const int port = std::stoi(s.substr(colon + 1));
  require(port > 0 && port <= 65535, "port out of range: " + s);
  return {s.substr(0, colon), static_cast<uint16_t>(port)};
}

SegMap<float> load_segmap_any(const std::string& path) {
  auto bytes = read_file(path);
  require(bytes.size() > 7, path + ": truncated file");
  if (bytes[6] == static_cast<uint8_t>(wire::Kind::kSegDiscrete)) {
    auto d = deserialize_labels(bytes.data(), bytes.size());
    return one_hot<float>(d.dims, d.labels, d.classes);
  }
  return deserialize_segmap<float>(bytes.data(), bytes.size());
}

struct LabeledItems {
  std::vector<Volume<float>> images;
  std::vector<SegMap<float>> segmaps;
  std::vector<int> subject_of;
};

LabeledItems load_labeled(const std::vector<std::string>& roots) {
  LabeledItems out;
  int next_subject = 0;
  std::map<std::string, int> subject_index;
  for (const auto& root : roots) {
    for (auto& rec : load_corpus<float>(root)) {
      auto [it, fresh] = subject_index.try_emplace(rec.subject_id, next_subject);
      if (fresh) ++next_subject;
      for (auto& [vol, seg] : rec.scans) {
        out.images.push_back(std::move(vol));
        out.segmaps.push_back(std::move(seg));
        out.subject_of.push_back(it->second);
      }
    }
  }
  return out;
}

nlohmann::json reid_json(const ReidResult& r, double chance) {
  nlohmann::json j{{"map", r.map}, {"chance", chance}, {"queries", r.queries},
                   {"excluded_queries", r.excluded_queries}};
  if (r.f1) j["f1"] = *r.f1;
  return j;
}

nlohmann::json histogram_json(const HistogramPair& h) {
  return {{"intersection", h.intersection},
          {"intra", std::vector<double>(h.intra.bins.begin(), h.intra.bins.end())},
          {"inter", std::vector<double>(h.inter.bins.begin(), h.inter.bins.end())}};
}

volatile std::sig_atomic_t g_stop = 0;

int run(int argc, char** argv) {
  CLI::App app{"key-conditioned deformation proxy for volumetric segmentation"};
  app.require_subcommand(1);

  // ---- phantom ----
  auto* phantom = app.add_subcommand("phantom", "synthesize a labeled phantom corpus");
  std::string phantom_spec_path, phantom_out;
  phantom->add_option("--spec", phantom_spec_path, "spec JSON; omit for defaults");
  phantom->add_option("--out", phantom_out, "output corpus directory")->required();
  phantom->callback([&] {
    PhantomSpec spec;
    if (!phantom_spec_path.empty()) spec = read_json(phantom_spec_path).get<PhantomSpec>();
    auto corpus = synthesize_corpus<float>(spec);
    save_corpus(phantom_out, corpus, spec);
    std::cout << "wrote " << corpus.size() << " subjects to " << phantom_out << "\n";
  });

  // ---- train ----
  auto* train = app.add_subcommand("train", "train segmenter (and proxy nets) on a corpus");
  std::string train_config_path, train_out, train_data, train_ablate, train_resume;
  train->add_option("--config", train_config_path, "run config JSON")->required();
  train->add_option("--out", train_out, "output directory for checkpoints and log")->required();
  train->add_option("--data", train_data, "corpus directory; omit to synthesize the default");
  train->add_option("--ablate", train_ablate, "zero one loss weight: inv|smt|div");
  train->add_option("--resume", train_resume, "checkpoint directory to resume from");
  train->callback([&] {
    TrainConfig cfg = read_json(train_config_path).get<TrainConfig>();
    if (!train_ablate.empty()) apply_ablation(cfg, train_ablate);
    fs::create_directories(train_out);
    cfg.checkpoint_dir = (fs::path(train_out) / "checkpoint").string();
    if (cfg.log_path.empty()) cfg.log_path = (fs::path(train_out) / "metrics.jsonl").string();
    std::vector<SubjectRecord<float>> corpus =
        train_data.empty() ? synthesize_corpus<float>(PhantomSpec{})
                           : load_corpus<float>(train_data);
    Trainer<float> trainer(cfg, corpus);
    if (!train_resume.empty()) trainer.load_state(train_resume);
    trainer.run();
    std::cout << "finished epoch " << trainer.epoch() << "; state in " << cfg.checkpoint_dir
              << "\n";
  });

  // ---- attack ----
  auto* attack = app.add_subcommand("attack", "re-identification attack on a corpus");
  std::string atk_gallery, atk_queries, atk_similarity = "ms-ssim", atk_report, atk_model;
  attack->add_option("--gallery", atk_gallery, "corpus directory")->required();
  attack->add_option("--queries", atk_queries, "extra corpus directory merged into the gallery");
  attack->add_option("--similarity", atk_similarity, "ms-ssim|siamese")
      ->check(CLI::IsMember({"ms-ssim", "siamese"}));
  attack->add_option("--model", atk_model, "discriminator checkpoint (siamese only)");
  attack->add_option("--report", atk_report, "write the JSON report here (default stdout)");
  attack->callback([&] {
    std::vector<std::string> roots{atk_gallery};
    if (!atk_queries.empty()) roots.push_back(atk_queries);
    auto items = load_labeled(roots);
    const double chance = chance_level(items.subject_of);
    nlohmann::json report;
    report["similarity"] = atk_similarity;
    report["items"] = items.images.size();
    if (atk_similarity == "siamese") {
      require(!atk_model.empty(), "--similarity siamese requires --model");
      std::mt19937_64 rng(0);
      SiameseDiscriminator<float> d(checkpoint_config(atk_model, "discriminator"), rng);
      load_checkpoint<float>(atk_model, "discriminator", d);
      auto sim = pairwise_siamese(d, items.segmaps);
      auto res = reid_from_similarity(sim, items.subject_of);
      res.f1 = pair_f1(sim, items.subject_of);
      report["segmentations"] = reid_json(res, chance);
      report["segmentations"]["histograms"] =
          histogram_json(split_histograms(sim, items.subject_of));
    } else {
      auto img_sim = pairwise_ms_ssim(items.images);
      auto img = reid_from_similarity(img_sim, items.subject_of);
      report["images"] = reid_json(img, chance);
      report["images"]["histograms"] = histogram_json(split_histograms(img_sim, items.subject_of));
      auto seg_sim = pairwise_ms_ssim(items.segmaps);
      auto seg = reid_from_similarity(seg_sim, items.subject_of);
      report["segmentations"] = reid_json(seg, chance);
      report["segmentations"]["histograms"] =
          histogram_json(split_histograms(seg_sim, items.subject_of));
    }
    if (atk_report.empty()) {
      std::cout << report.dump(2) << "\n";
    } else {
      std::ofstream f(atk_report);
      require(f.good(), "cannot write " + atk_report);
      f << report.dump(2) << "\n";
    }
  });

  // ---- evaluate ----
  auto* evaluate = app.add_subcommand("evaluate", "Dice of predictions against ground truth");
  std::string eval_pred, eval_truth;
  evaluate->add_option("--pred", eval_pred, "directory of predicted .seg files")->required();
  evaluate->add_option("--truth", eval_truth, "directory of ground-truth .seg files")->required();
  evaluate->callback([&] {
    std::vector<SegMap<float>> preds, truths;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(eval_pred))
      if (e.is_regular_file() && e.path().extension() == ".seg") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    require(!files.empty(), "no .seg files under " + eval_pred);
    for (const auto& p : files) {
      const auto rel = fs::relative(p, eval_pred);
      const auto t = fs::path(eval_truth) / rel;
      require(fs::exists(t), "no ground truth for " + rel.string());
      preds.push_back(load_segmap_any(p.string()));
      truths.push_back(load_segmap_any(t.string()));
    }
    auto rep = dsc_report(preds, truths);
    nlohmann::json j{{"pairs", files.size()}, {"overall", rep.overall}};
    for (size_t c = 0; c < rep.per_class.size(); ++c)
      j["per_class"].push_back({{"class", c}, {"dsc", rep.per_class[c]}, {"absent", (bool)rep.absent[c]}});
    std::cout << j.dump(2) << "\n";
  });

  // ---- encode ----
  auto* encode = app.add_subcommand("encode", "key and deform a volume for remote segmentation");
  std::string enc_model, enc_key, enc_in, enc_out, enc_flow_out;
  bool enc_keygen = false;
  encode->add_option("--model", enc_model, "generator checkpoint")->required();
  encode->add_option("--key", enc_key, "key as hex-encoded float32 values");
  encode->add_flag("--keygen", enc_keygen, "generate a fresh random key (printed to stdout)");
  encode->add_option("--in", enc_in, "input volume")->required();
  encode->add_option("--out", enc_out, "deformed volume output")->required();
  encode->add_option("--flow-out", enc_flow_out, "inverse-flow output, needed by decode")
      ->required();
  encode->callback([&] {
    require(enc_keygen != !enc_key.empty(), "provide exactly one of --key and --keygen");
    std::mt19937_64 rng(0);
    GeneratorNet<float> gen(checkpoint_config(enc_model, "generator"), rng);
    load_checkpoint<float>(enc_model, "generator", gen);
    VecX<float> key_values;
    if (enc_keygen) {
      std::random_device rd;
      std::mt19937_64 key_rng((static_cast<uint64_t>(rd()) << 32) | rd());
      std::normal_distribution<float> dist(0.0f, 1.0f);
      key_values.resize(gen.config().key_length);
      for (long i = 0; i < key_values.size(); ++i) key_values[i] = dist(key_rng);
      std::cout << "key " << key_to_hex(key_values) << "\n";
    } else {
      key_values = key_from_hex(enc_key, gen.config().key_length);
    }
    auto bytes = read_file(enc_in);
    auto x = deserialize_volume<float>(bytes.data(), bytes.size());
    auto enc = client_encode(gen, x, PrivateKey<float>(key_values));
    write_file(enc_out, serialize(enc.deformed));
    write_file(enc_flow_out, serialize(enc.inverse_flow));
    std::cout << "wrote " << enc_out << " and " << enc_flow_out << "\n";
  });

  // ---- serve ----
  auto* serve = app.add_subcommand("serve", "run the segmentation service");
  std::string srv_model, srv_listen = "127.0.0.1:7420";
  serve->add_option("--model", srv_model, "segmenter checkpoint")->required();
  serve->add_option("--listen", srv_listen, "addr:port (default 127.0.0.1:7420)");
  serve->callback([&] {
    std::mt19937_64 rng(0);
    SegmentationNet<float> net(checkpoint_config(srv_model, "segmenter"), rng);
    load_checkpoint<float>(srv_model, "segmenter", net);
    auto [addr, port] = parse_endpoint(srv_listen);
    ProxyServer<float> server(net, addr, port);
    std::cout << "listening on " << addr << ":" << server.port() << "\n";
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });

  // ---- segment-remote ----
  auto* remote = app.add_subcommand("segment-remote", "send a deformed volume for segmentation");
  std::string rem_server, rem_in, rem_out;
  remote->add_option("--server", rem_server, "addr:port")->required();
  remote->add_option("--in", rem_in, "deformed volume (from encode)")->required();
  remote->add_option("--out", rem_out, "deformed soft segmentation output")->required();
  remote->callback([&] {
    auto [addr, port] = parse_endpoint(rem_server);
    auto request = ProxyRequest::from_proxy_volume_bytes(read_file(rem_in));
    ProxyClient client(addr, port);
    auto resp = client.roundtrip(request);
    // validate before writing
    deserialize_segmap<float>(resp.payload.data(), resp.payload.size());
    write_file(rem_out, resp.payload);
    std::cout << "request " << request.id().hex() << " answered by model version "
              << resp.model_version << "\n";
  });

  // ---- decode ----
  auto* decode = app.add_subcommand("decode", "map a deformed segmentation back to the original space");
  std::string dec_flow, dec_in, dec_out;
  decode->add_option("--flow", dec_flow, "inverse flow (from encode)")->required();
  decode->add_option("--in", dec_in, "deformed soft segmentation")->required();
  decode->add_option("--out", dec_out, "discrete segmentation output")->required();
  decode->callback([&] {
    auto flow_bytes = read_file(dec_flow);
    auto flow = deserialize_flow<float>(flow_bytes.data(), flow_bytes.size());
    auto seg_bytes = read_file(dec_in);
    auto y_d = deserialize_segmap<float>(seg_bytes.data(), seg_bytes.size());
    auto y = client_decode(flow, y_d);
    write_file(dec_out, serialize_labels(y.dims, y.argmax(), y.classes));
    std::cout << "wrote " << dec_out << "\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
