#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ivit/data.hpp"
#include "ivit/models.hpp"

namespace ivit {

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t epochs = 63;
  /// Stops mid-epoch once this many optimizer steps have run; 0 = no cap.
  std::size_t max_steps = 2000;
  std::string dataset = "quadrant";
  std::size_t train_size = 2048;
  std::size_t test_size = 512;
  std::uint64_t data_seed = 0;
  std::string data_dir;
  /// Optional fit-init output; impulse init fits in-process when empty.
  std::string init_factors;
  bool augment_flip = false;
  bool augment_crop = false;
  std::size_t eval_batch = 256;
  /// Off by default so that metrics files are byte-reproducible.
  bool record_wall_time = false;
  /// Ends the run after the first per-epoch test evaluation at or above
  /// this accuracy. 0 disables the early stop.
  double stop_at_accuracy = 0.0;

  void validate() const {
    model.validate();
    require(lr > 0.0, "config: lr must be positive");
    require(batch > 0 && eval_batch > 0, "config: batch sizes must be positive");
    require(stop_at_accuracy >= 0.0 && stop_at_accuracy <= 1.0, "config: stop_at_accuracy must lie in [0,1]");
    require(dataset == "quadrant" || dataset == "cifar10", "config: dataset must be quadrant or cifar10");
    require(dataset != "cifar10" || !data_dir.empty(), "config: cifar10 needs data_dir");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    model.write(kv);
    kv.set("lr", lr);
    kv.set("batch", static_cast<std::uint64_t>(batch));
    kv.set("epochs", static_cast<std::uint64_t>(epochs));
    kv.set("max_steps", static_cast<std::uint64_t>(max_steps));
    kv.set("dataset", dataset);
    kv.set("train_size", static_cast<std::uint64_t>(train_size));
    kv.set("test_size", static_cast<std::uint64_t>(test_size));
    kv.set("data_seed", data_seed);
    kv.set("data_dir", data_dir);
    kv.set("init_factors", init_factors);
    kv.set("augment_flip", augment_flip);
    kv.set("augment_crop", augment_crop);
    kv.set("eval_batch", static_cast<std::uint64_t>(eval_batch));
    kv.set("record_wall_time", record_wall_time);
    kv.set("stop_at_accuracy", stop_at_accuracy);
    return kv;
  }

  void read(const KeyValues& kv) {
    model.read(kv);
    auto u = [&](const char* key, std::size_t& f) {
      if (kv.contains(key)) f = kv.get_uint(key);
    };
    auto b = [&](const char* key, bool& f) {
      if (kv.contains(key)) f = kv.get_bool(key);
    };
    auto s = [&](const char* key, std::string& f) {
      if (kv.contains(key)) f = kv.get(key);
    };
    if (kv.contains("lr")) lr = kv.get_double("lr");
    u("batch", batch);
    u("epochs", epochs);
    u("max_steps", max_steps);
    s("dataset", dataset);
    u("train_size", train_size);
    u("test_size", test_size);
    if (kv.contains("data_seed")) data_seed = kv.get_uint("data_seed");
    s("data_dir", data_dir);
    s("init_factors", init_factors);
    b("augment_flip", augment_flip);
    b("augment_crop", augment_crop);
    u("eval_batch", eval_batch);
    b("record_wall_time", record_wall_time);
    if (kv.contains("stop_at_accuracy")) stop_at_accuracy = kv.get_double("stop_at_accuracy");
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k = [] {
      std::set<std::string> all = ModelConfig::keys();
      for (const char* key : {"lr", "batch", "epochs", "max_steps", "dataset", "train_size", "test_size", "data_seed",
                              "data_dir", "init_factors", "augment_flip", "augment_crop", "eval_batch",
                              "record_wall_time", "stop_at_accuracy"})
        all.insert(key);
      return all;
    }();
    return k;
  }

  /// Reads a config file; unknown keys are rejected.
  static TrainConfig from_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    TrainConfig cfg;
    try {
      cfg.read(KeyValues::parse(std::string(bytes.begin(), bytes.end()), keys()));
    } catch (const Error& e) {
      throw Error(path.string() + ": " + e.what());
    }
    return cfg;
  }
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double wall_ms = 0.0;
};

struct RunMetrics {
  std::vector<MetricsRow> rows;

  static constexpr const char* kHeader = "epoch,step,split,loss,accuracy,wall_ms";

  std::string to_csv() const {
    std::ostringstream os;
    os << kHeader << "\n";
    for (const auto& r : rows)
      os << r.epoch << ',' << r.step << ',' << r.split << ',' << KeyValues::format_double(r.loss) << ','
         << KeyValues::format_double(r.accuracy) << ',' << KeyValues::format_double(r.wall_ms) << "\n";
    return os.str();
  }

  static RunMetrics parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    require(std::getline(in, line) && line == kHeader, "metrics: bad header");
    RunMetrics m;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ls(line);
      for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
      require(cells.size() == 6, "metrics: expected 6 columns in '" + line + "'");
      MetricsRow r;
      r.epoch = KeyValues::parse_uint("epoch", cells[0]);
      r.step = KeyValues::parse_uint("step", cells[1]);
      r.split = cells[2];
      r.loss = KeyValues::parse_double("loss", cells[3]);
      r.accuracy = KeyValues::parse_double("accuracy", cells[4]);
      r.wall_ms = KeyValues::parse_double("wall_ms", cells[5]);
      require(r.accuracy >= 0.0 && r.accuracy <= 1.0, "metrics: accuracy outside [0,1]");
      require(m.rows.empty() || m.rows.back().epoch <= r.epoch, "metrics: epochs must not decrease");
      m.rows.push_back(r);
    }
    return m;
  }

  /// Step of the first test row reaching `accuracy`, if any.
  std::optional<std::size_t> steps_to_accuracy(double accuracy) const {
    for (const auto& r : rows)
      if (r.split == "test" && r.accuracy >= accuracy) return r.step;
    return std::nullopt;
  }

  const MetricsRow& final_test() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
      if (it->split == "test") return *it;
    throw Error("metrics: no test rows");
  }
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline Evaluation evaluate(const ModelState& state, const Dataset& ds, std::size_t batch = 256) {
  require(ds.size() > 0, "evaluate: empty dataset");
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t count = std::min(batch, ds.size() - start);
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), start);
    Graph g;
    ModelGraph mg(g, state);
    const Var logits = mg.forward(make_patches(ds, idx, state.config.patch), count);
    std::vector<int> labels(ds.labels.begin() + static_cast<std::ptrdiff_t>(start),
                            ds.labels.begin() + static_cast<std::ptrdiff_t>(start + count));
    loss += g.value(g.softmax_cross_entropy(logits, labels))(0, 0) * static_cast<double>(count);
    const auto pred = row_argmax(g.value(logits));
    for (std::size_t i = 0; i < count; ++i) correct += static_cast<int>(pred[i]) == labels[i] ? 1 : 0;
  }
  return {loss / static_cast<double>(ds.size()), static_cast<double>(correct) / static_cast<double>(ds.size())};
}

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Loads or generates both splits and normalizes them with train statistics.
inline DataSplits load_datasets(const TrainConfig& cfg) {
  DataSplits d;
  if (cfg.dataset == "quadrant") {
    require(cfg.model.image_height == cfg.model.image_width, "quadrant images are square");
    d.train = make_synthetic_quadrant_dataset(cfg.train_size, cfg.model.image_height, cfg.data_seed,
                                              cfg.model.channels, "train");
    d.test = make_synthetic_quadrant_dataset(cfg.test_size, cfg.model.image_height, cfg.data_seed,
                                             cfg.model.channels, "test");
  } else {
    d.train = load_cifar10_dir(cfg.data_dir, "train");
    d.test = load_cifar10_dir(cfg.data_dir, "test");
  }
  for (const Dataset* ds : {&d.train, &d.test}) {
    require(ds->height == cfg.model.image_height && ds->width == cfg.model.image_width &&
                ds->channels == cfg.model.channels,
            "dataset images do not match the model's image shape");
    require(ds->classes == cfg.model.classes, "dataset class count does not match the model");
    ds->validate();
  }
  d.train.norm = compute_normalization(d.train);
  d.test.norm = d.train.norm;
  return d;
}

/// Writes fitted per-layer factors as "layer<l>.head<h>.q/.k".
inline Checkpoint factors_checkpoint(const ModelConfig& config, const std::vector<AttentionFactor>& factors) {
  Checkpoint ckpt;
  ckpt.metadata.set("kind", "factors");
  ckpt.metadata.set("layers", static_cast<std::uint64_t>(factors.size()));
  config.write(ckpt.metadata);
  for (std::size_t l = 0; l < factors.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    store_factor(ckpt.tensors, factors[l], prefix);
    describe_factor(ckpt.metadata, factors[l], prefix);
  }
  return ckpt;
}

inline std::vector<AttentionFactor> factors_from_checkpoint(const Checkpoint& ckpt) {
  require(ckpt.metadata.contains("kind") && ckpt.metadata.get("kind") == "factors",
          "checkpoint does not hold fitted factors");
  std::vector<AttentionFactor> out;
  const auto layers = ckpt.metadata.get_uint("layers");
  for (std::uint64_t l = 0; l < layers; ++l) out.push_back(load_factor(ckpt, "layer" + std::to_string(l) + "."));
  return out;
}

/// Initial model for a run: fitted (or loaded) impulse factors, or random Q/K.
inline ModelState initial_model(const TrainConfig& cfg) {
  const ModelConfig& m = cfg.model;
  if (m.mixing == MixingMode::ConvMixer || m.init == InitStrategy::Random) return init_model(m);
  if (!cfg.init_factors.empty()) return init_model(m, factors_from_checkpoint(load_checkpoint(cfg.init_factors)));
  return init_model(m, fit_impulse_factors(m));
}

struct TrainResult {
  ModelState state;
  RunMetrics metrics;
};

/// Cross-entropy training with Adam. Shuffling and augmentation draw from
/// one stream owned by the trainer, so runs are reproducible per seed.
inline TrainResult train(const TrainConfig& cfg, ModelState state, const DataSplits& data) {
  cfg.validate();
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  auto wall = [&] {
    if (!cfg.record_wall_time) return 0.0;
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };

  TrainResult res{std::move(state), {}};
  ModelState& st = res.state;
  AdamState adam(AdamOptions{cfg.lr});
  Rng rng = stream(cfg.model.seed, "trainer");
  const Augmentation aug{cfg.augment_flip, cfg.augment_crop};
  const std::size_t n = data.train.size();

  const Evaluation initial = evaluate(st, data.test, cfg.eval_batch);
  res.metrics.rows.push_back({0, 0, "test", initial.loss, initial.accuracy, wall()});

  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.max_steps && step >= cfg.max_steps) break;
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      if (cfg.max_steps && step >= cfg.max_steps) break;
      const std::size_t count = std::min(cfg.batch, n - start);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(start + count));
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(data.train.labels[i]);

      const Matrix patches = make_patches(data.train, idx, cfg.model.patch, aug, &rng);
      Graph g;
      Var logits;
      double lv = 0.0;
      try {
        ModelGraph mg(g, st);
        logits = mg.forward(patches, count);
        const Var loss = g.softmax_cross_entropy(logits, labels);
        lv = g.value(loss)(0, 0);
        require(std::isfinite(lv), "non-finite loss");
        adam.step(st.params, g.backward(loss).parameters());
      } catch (const Error& e) {
        throw Error("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
      }
      ++step;
      loss_sum += lv * static_cast<double>(count);
      seen += count;
      const auto pred = row_argmax(g.value(logits));
      for (std::size_t i = 0; i < count; ++i) correct += static_cast<int>(pred[i]) == labels[i] ? 1 : 0;
    }
    if (seen == 0) break;
    res.metrics.rows.push_back({epoch, step, "train", loss_sum / static_cast<double>(seen),
                                static_cast<double>(correct) / static_cast<double>(seen), wall()});
    Evaluation ev;
    try {
      ev = evaluate(st, data.test, cfg.eval_batch);
    } catch (const Error& e) {
      throw Error("training diverged by step " + std::to_string(step) + ": " + e.what());
    }
    res.metrics.rows.push_back({epoch, step, "test", ev.loss, ev.accuracy, wall()});
    if (cfg.stop_at_accuracy > 0.0 && ev.accuracy >= cfg.stop_at_accuracy) break;
  }
  return res;
}

/// Binary PGM (P5, maxval 255), scaled by the global max-absolute value:
/// [0,max] -> [0,255] when no entry is negative, else [-max,max] -> [0,255].
inline std::vector<std::uint8_t> encode_pgm(const Matrix& m) {
  require(!m.empty(), "pgm: empty matrix");
  require(m.all_finite(), "pgm: non-finite values");
  const double peak = max_abs(m);
  bool negative = false;
  for (double v : m.data()) negative = negative || v < 0.0;
  const std::string header = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : m.data()) {
    double unit = 0.0;  // position in [0,1]
    if (peak > 0.0) unit = negative ? (v / peak + 1.0) / 2.0 : v / peak;
    else if (negative) unit = 0.5;
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0)));
  }
  return out;
}

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline PgmImage decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string magic;
  std::size_t maxval = 0;
  PgmImage img;
  in >> magic >> img.width >> img.height >> maxval;
  require(in && magic == "P5" && maxval == 255, "pgm: unsupported header");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  require(bytes.size() == offset + img.width * img.height, "pgm: pixel count does not match header");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return img;
}

struct AttentionProbe {
  /// nullopt probes with the positional encoding alone; otherwise the
  /// test-split image whose tokens feed the blend.
  std::optional<std::size_t> sample;
};

struct ExportedMaps {
  Matrix qk;         ///< Q K^T
  Matrix projected;  ///< Z Q K^T Z^T (equals Q K^T for model_III)
  Matrix softmax;    ///< softmax(sigma * projected)
};

/// The three views of one head's attention. For model_I_blend with a sample
/// probe, Z = alpha X + (1 - alpha) P with X the layer's normalized tokens.
inline ExportedMaps attention_views(const ModelState& st, std::size_t layer, std::size_t head,
                                    const AttentionProbe& probe = {}, const Dataset* samples = nullptr) {
  const ModelConfig& cfg = st.config;
  require(cfg.mixing != MixingMode::ConvMixer, "convmixer models have no attention maps");
  require(layer < cfg.depth, "layer " + std::to_string(layer) + " out of range (depth " +
                                 std::to_string(cfg.depth) + ")");
  require(head < cfg.heads, "head " + std::to_string(head) + " out of range (" + std::to_string(cfg.heads) +
                                " heads)");
  const Matrix& q = st.params.at(qk_name(layer, head, 'q'));
  const Matrix& k = st.params.at(qk_name(layer, head, 'k'));
  ExportedMaps out;
  out.qk = matmul_nt(q, k);
  if (cfg.mixing == MixingMode::ModelIII) {
    out.projected = out.qk;
  } else {
    Matrix z = sincos_posenc_2d(cfg.grid(), cfg.dim).p;
    if (probe.sample && cfg.mixing == MixingMode::ModelIBlend) {
      require(samples != nullptr && *probe.sample < samples->size(), "probe sample index out of range");
      ForwardTrace trace;
      forward_classify(st, make_patches(*samples, {*probe.sample}, cfg.patch), 1, &trace);
      z = blend(cfg.alpha, trace.mix_inputs[layer], z);
    }
    out.projected = matmul_nt(matmul(z, q), matmul(z, k));
  }
  out.softmax = softmax_rows(out.projected, cfg.attention_scale());
  return out;
}

/// Writes <prefix>_qk.pgm, <prefix>_pqkp.pgm and <prefix>_softmax.pgm.
inline std::vector<std::filesystem::path> export_attention_maps(const ModelState& st, std::size_t layer,
                                                                std::size_t head, const AttentionProbe& probe,
                                                                const std::string& out_prefix,
                                                                const Dataset* samples = nullptr) {
  const ExportedMaps maps = attention_views(st, layer, head, probe, samples);
  std::vector<std::filesystem::path> written;
  for (const auto& [suffix, m] : {std::pair<const char*, const Matrix*>{"_qk.pgm", &maps.qk},
                                  {"_pqkp.pgm", &maps.projected},
                                  {"_softmax.pgm", &maps.softmax}}) {
    const std::filesystem::path path = out_prefix + suffix;
    write_file_bytes(path, encode_pgm(*m));
    written.push_back(path);
  }
  return written;
}

}  // namespace ivit
