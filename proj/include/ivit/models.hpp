#pragma once

// Toy Simple-ViT variants and a ConvMixer-style reference sharing one
// pipeline:
//
//   patch-embed -> [x += mix(LN(x)); x += MLP(LN(x))] x L -> mean-pool -> LN -> linear
//
// Spatial mixing per head h (sigma = attention scale):
//   model_I_blend  softmax(sigma * Z Qh Kh^T Z^T), Z = alpha X + (1 - alpha) P
//   model_II       softmax(sigma * P Qh Kh^T P^T)       (shared across the batch)
//   model_III      softmax(sigma * Qh Kh^T), Qh in R^{N x D/H}
//   convmixer      channel c mixed by its own wrap-around filter
// P never enters the token stream; it only appears inside the logits.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ivit/attention_init.hpp"
#include "ivit/autodiff.hpp"
#include "ivit/checkpoint.hpp"
#include "ivit/filters.hpp"
#include "ivit/key_values.hpp"

namespace ivit {

enum class MixingMode { ModelIBlend, ModelII, ModelIII, ConvMixer };
enum class InitStrategy { Random, Impulse };

inline std::string to_string(MixingMode m) {
  switch (m) {
    case MixingMode::ModelIBlend: return "model_I_blend";
    case MixingMode::ModelII: return "model_II";
    case MixingMode::ModelIII: return "model_III";
    case MixingMode::ConvMixer: return "convmixer";
  }
  return "?";
}

inline MixingMode parse_mixing_mode(const std::string& s) {
  if (s == "model_I_blend" || s == "model_I") return MixingMode::ModelIBlend;
  if (s == "model_II") return MixingMode::ModelII;
  if (s == "model_III") return MixingMode::ModelIII;
  if (s == "convmixer") return MixingMode::ConvMixer;
  throw Error("unknown mixing mode '" + s + "'");
}

inline std::string to_string(InitStrategy s) { return s == InitStrategy::Random ? "random" : "impulse"; }

inline InitStrategy parse_init_strategy(const std::string& s) {
  if (s == "random") return InitStrategy::Random;
  if (s == "impulse") return InitStrategy::Impulse;
  throw Error("unknown init strategy '" + s + "'");
}

struct ModelConfig {
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t classes = 4;
  MixingMode mixing = MixingMode::ModelIBlend;
  double alpha = 0.2;
  bool use_value = true;
  bool qk_trainable = true;
  InitStrategy init = InitStrategy::Impulse;
  /// Attention scale, shared by fitting and training. 0 picks the mode
  /// default: 1.0 for model_III, 0.1 for the positional-encoding modes.
  double sigma = 0.0;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  // impulse fitting
  std::size_t filter_size = 3;
  double eta = 100.0;
  double fit_lr = 1e-4;
  std::size_t fit_epochs = 10000;

  // convmixer spatial filters
  FilterKind conv_kind = FilterKind::Impulse;
  std::size_t conv_heads = 0;  ///< 0 = one filter per channel
  double conv_sigma = 1.0;

  Grid grid() const { return {image_height / patch, image_width / patch}; }
  std::size_t tokens() const { return grid().tokens(); }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t patch_features() const { return patch * patch * channels; }
  double attention_scale() const {
    if (sigma > 0.0) return sigma;
    return mixing == MixingMode::ModelIII ? 1.0 : 0.1;
  }

  void validate() const {
    require(patch > 0 && image_height % patch == 0 && image_width % patch == 0,
            "config: patch size must divide the image sides");
    require(heads > 0 && dim % heads == 0, "config: heads must divide dim");
    require(depth > 0 && classes > 1 && channels > 0, "config: depth, classes and channels must be positive");
    require(alpha >= 0.0 && alpha <= 1.0, "config: alpha must lie in [0,1]");
    require(sigma >= 0.0, "config: sigma must be non-negative");
    require(mlp_ratio > 0, "config: mlp_ratio must be positive");
    if (mixing == MixingMode::ModelIBlend || mixing == MixingMode::ModelII)
      require(dim % 4 == 0, "config: dim must be divisible by 4 for the positional encoding");
    if (mixing == MixingMode::ConvMixer) {
      require(filter_size % 2 == 1, "config: filter_size must be odd");
      const std::size_t h = conv_heads ? conv_heads : dim;
      require(dim % h == 0, "config: conv_heads must divide dim");
    }
  }

  void write(KeyValues& kv) const {
    kv.set("image_height", static_cast<std::uint64_t>(image_height));
    kv.set("image_width", static_cast<std::uint64_t>(image_width));
    kv.set("channels", static_cast<std::uint64_t>(channels));
    kv.set("patch", static_cast<std::uint64_t>(patch));
    kv.set("dim", static_cast<std::uint64_t>(dim));
    kv.set("heads", static_cast<std::uint64_t>(heads));
    kv.set("depth", static_cast<std::uint64_t>(depth));
    kv.set("classes", static_cast<std::uint64_t>(classes));
    kv.set("mixing", to_string(mixing));
    kv.set("alpha", alpha);
    kv.set("use_value", use_value);
    kv.set("qk_trainable", qk_trainable);
    kv.set("init", to_string(init));
    kv.set("sigma", sigma);
    kv.set("mlp_ratio", static_cast<std::uint64_t>(mlp_ratio));
    kv.set("seed", seed);
    kv.set("init_std", init_std);
    kv.set("filter_size", static_cast<std::uint64_t>(filter_size));
    kv.set("eta", eta);
    kv.set("fit_lr", fit_lr);
    kv.set("fit_epochs", static_cast<std::uint64_t>(fit_epochs));
    kv.set("conv_kind", to_string(conv_kind));
    kv.set("conv_heads", static_cast<std::uint64_t>(conv_heads));
    kv.set("conv_sigma", conv_sigma);
  }

  /// Applies every model key present in kv; absent keys keep their values.
  void read(const KeyValues& kv) {
    auto u = [&](const char* key, std::size_t& field) {
      if (kv.contains(key)) field = kv.get_uint(key);
    };
    auto d = [&](const char* key, double& field) {
      if (kv.contains(key)) field = kv.get_double(key);
    };
    auto b = [&](const char* key, bool& field) {
      if (kv.contains(key)) field = kv.get_bool(key);
    };
    u("image_height", image_height);
    u("image_width", image_width);
    u("channels", channels);
    u("patch", patch);
    u("dim", dim);
    u("heads", heads);
    u("depth", depth);
    u("classes", classes);
    if (kv.contains("mixing")) mixing = parse_mixing_mode(kv.get("mixing"));
    d("alpha", alpha);
    b("use_value", use_value);
    b("qk_trainable", qk_trainable);
    if (kv.contains("init")) init = parse_init_strategy(kv.get("init"));
    d("sigma", sigma);
    u("mlp_ratio", mlp_ratio);
    if (kv.contains("seed")) seed = kv.get_uint("seed");
    d("init_std", init_std);
    u("filter_size", filter_size);
    d("eta", eta);
    d("fit_lr", fit_lr);
    u("fit_epochs", fit_epochs);
    if (kv.contains("conv_kind")) conv_kind = parse_filter_kind(kv.get("conv_kind"));
    u("conv_heads", conv_heads);
    d("conv_sigma", conv_sigma);
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k = {
        "image_height", "image_width", "channels",   "patch",      "dim",       "heads",
        "depth",        "classes",     "mixing",     "alpha",      "use_value", "qk_trainable",
        "init",         "sigma",       "mlp_ratio",  "seed",       "init_std",  "filter_size",
        "eta",          "fit_lr",      "fit_epochs", "conv_kind",  "conv_heads", "conv_sigma"};
    return k;
  }
};

inline std::string qk_name(std::size_t layer, std::size_t head, char which) {
  return "layer" + std::to_string(layer) + ".head" + std::to_string(head) + "." + which;
}

inline bool is_qk_tensor(const std::string& name) {
  return name.size() > 2 && name[name.size() - 2] == '.' && (name.back() == 'q' || name.back() == 'k') &&
         name.find(".head") != std::string::npos;
}

struct ModelState {
  ModelConfig config;
  NamedTensors params;
  /// Tensors Adam may update. Frozen Q/K and fixed conv taps are excluded.
  std::set<std::string> trainable;
};

/// Factor fitting options matching what `config` needs for one layer.
inline FitOptions layer_fit_options(const ModelConfig& config, std::size_t layer) {
  FitOptions opt;
  opt.mode = config.mixing == MixingMode::ModelIII ? FitMode::Free : FitMode::Posenc;
  opt.sigma = config.attention_scale();
  if (opt.mode == FitMode::Posenc) opt.eta = config.eta;
  opt.lr = config.fit_lr;
  opt.epochs = config.fit_epochs;
  opt.seed = mix_seed(config.seed ^ mix_seed(1000 + layer));
  opt.head_dim = config.head_dim();
  return opt;
}

/// One factor per layer, each fitted to its own random impulse target set.
inline std::vector<AttentionFactor> fit_impulse_factors(const ModelConfig& config) {
  config.validate();
  require(config.mixing != MixingMode::ConvMixer, "convmixer models have no attention to fit");
  const PositionalEncoding pe = sincos_posenc_2d(config.grid(), config.dim);
  std::vector<AttentionFactor> out;
  for (std::size_t l = 0; l < config.depth; ++l) {
    const FitOptions opt = layer_fit_options(config, l);
    const auto targets = impulse_targets(config.grid(), config.heads, config.filter_size, opt.seed);
    out.push_back(fit_attention_factorization(targets, opt, opt.mode == FitMode::Posenc ? &pe : nullptr));
  }
  return out;
}

/// Builds every tensor from its own seeded stream, so the random and
/// impulse strategies differ only in Q and K.
inline ModelState init_model(const ModelConfig& config, const std::vector<AttentionFactor>& factors = {}) {
  config.validate();
  const bool attention = config.mixing != MixingMode::ConvMixer;
  const bool impulse = attention && config.init == InitStrategy::Impulse;
  require(!impulse || factors.size() == config.depth, "impulse init needs one fitted factor per layer");
  require(impulse || factors.empty(), "fitted factors are only used by impulse init");

  ModelState st{config, {}, {}};
  const std::size_t d = config.dim, n = config.tokens(), kh = config.head_dim();
  auto weight = [&](const std::string& name, std::size_t rows, std::size_t cols, bool trainable = true) {
    Rng rng = stream(config.seed, name);
    st.params.set(name, Matrix::normal(rows, cols, config.init_std, rng));
    if (trainable) st.trainable.insert(name);
  };
  auto constant = [&](const std::string& name, std::size_t cols, double v) {
    st.params.set(name, Matrix(1, cols, v));
    st.trainable.insert(name);
  };

  weight("embed.w", config.patch_features(), d);
  constant("embed.b", d, 0.0);
  for (std::size_t l = 0; l < config.depth; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    constant(p + "ln1.g", d, 1.0);
    constant(p + "ln1.b", d, 0.0);
    if (attention) {
      const FitMode want = config.mixing == MixingMode::ModelIII ? FitMode::Free : FitMode::Posenc;
      const std::size_t rows = config.mixing == MixingMode::ModelIII ? n : d;
      if (impulse) {
        const AttentionFactor& f = factors[l];
        require(f.mode == want, "factor mode does not match the mixing mode");
        require(f.heads() == config.heads, "factor head count does not match config");
      }
      for (std::size_t h = 0; h < config.heads; ++h)
        for (char which : {'q', 'k'}) {
          const std::string name = qk_name(l, h, which);
          if (impulse) {
            const Matrix& m = which == 'q' ? factors[l].q[h] : factors[l].k[h];
            require(m.rows() == rows && m.cols() == kh,
                    "factor shape " + m.shape_string() + " does not match " + std::to_string(rows) + "x" +
                        std::to_string(kh));
            st.params.set(name, m);
            if (config.qk_trainable) st.trainable.insert(name);
          } else {
            weight(name, rows, kh, config.qk_trainable);
          }
        }
      if (config.use_value) {
        weight(p + "v", d, d);
        weight(p + "o", d, d);
      }
    } else {
      const std::size_t fh = config.conv_heads ? config.conv_heads : d;
      const std::optional<double> sigma =
          config.conv_kind == FilterKind::Gaussian ? std::optional<double>(config.conv_sigma) : std::nullopt;
      const FilterBank bank =
          generate_filter_bank(config.conv_kind, config.filter_size, fh, d, mix_seed(config.seed ^ (77 + l)), sigma);
      Matrix taps(d, config.filter_size * config.filter_size);
      for (std::size_t c = 0; c < d; ++c) {
        const auto t = bank.for_channel(c).taps().data();
        std::copy(t.begin(), t.end(), taps.row(c).begin());
      }
      st.params.set(p + "taps", std::move(taps));
      if (config.conv_kind == FilterKind::LearnedPlaceholder) st.trainable.insert(p + "taps");
    }
    constant(p + "ln2.g", d, 1.0);
    constant(p + "ln2.b", d, 0.0);
    weight(p + "mlp.w1", d, d * config.mlp_ratio);
    constant(p + "mlp.b1", d * config.mlp_ratio, 0.0);
    weight(p + "mlp.w2", d * config.mlp_ratio, d);
    constant(p + "mlp.b2", d, 0.0);
  }
  constant("final_ln.g", d, 1.0);
  constant("final_ln.b", d, 0.0);
  weight("head.w", d, config.classes);
  constant("head.b", config.classes, 0.0);
  return st;
}

/// Optional capture of intermediate values during a forward pass.
struct ForwardTrace {
  /// [layer][head] attention maps, (B*N) x N (shared maps are tiled).
  std::vector<std::vector<Matrix>> maps;
  /// [layer] normalized tokens entering spatial mixing, (B*N) x D.
  std::vector<Matrix> mix_inputs;
};

/// Records a forward pass into a graph. Parameters are registered on first
/// use, so one ModelGraph serves one forward/backward.
class ModelGraph {
 public:
  ModelGraph(Graph& graph, const ModelState& state)
      : g_(graph), st_(state), cfg_(state.config) {
    if (cfg_.mixing == MixingMode::ModelIBlend || cfg_.mixing == MixingMode::ModelII)
      posenc_ = sincos_posenc_2d(cfg_.grid(), cfg_.dim).p;
  }

  Var param(const std::string& name) {
    if (auto it = vars_.find(name); it != vars_.end()) return it->second;
    const Var v = g_.parameter(name, st_.params.at(name), st_.trainable.count(name) != 0);
    vars_.emplace(name, v);
    return v;
  }

  /// x: (B*N) x D tokens. Returns (B*N) x D mixed tokens.
  Var spatial_mix(std::size_t layer, Var x, std::size_t batch, ForwardTrace* trace = nullptr) {
    const std::string p = "layer" + std::to_string(layer) + ".";
    const std::size_t n = cfg_.tokens(), kh = cfg_.head_dim();
    require(g_.value(x).rows() == batch * n && g_.value(x).cols() == cfg_.dim,
            "spatial_mix: expected " + std::to_string(batch * n) + "x" + std::to_string(cfg_.dim) +
                " tokens, got " + g_.value(x).shape_string());
    if (cfg_.mixing == MixingMode::ConvMixer) {
      const Grid grid = cfg_.grid();
      return g_.depthwise_conv_wrap(x, param(p + "taps"), grid.height, grid.width, batch);
    }
    if (trace) trace->mix_inputs.push_back(g_.value(x));

    const Var values = cfg_.use_value ? g_.matmul(x, param(p + "v")) : x;
    std::optional<Var> z;
    if (cfg_.mixing == MixingMode::ModelIBlend) {
      const Var ptile = g_.input(tiled_posenc(batch));
      z = g_.add(g_.scale(x, cfg_.alpha), g_.scale(ptile, 1.0 - cfg_.alpha));
    }
    std::vector<Var> outs;
    std::vector<Matrix> maps;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const Var q = param(qk_name(layer, h, 'q'));
      const Var k = param(qk_name(layer, h, 'k'));
      Var map;
      if (cfg_.mixing == MixingMode::ModelIBlend) {
        map = g_.softmax_rows(g_.block_matmul_nt(g_.matmul(*z, q), g_.matmul(*z, k), batch), cfg_.attention_scale());
      } else {
        Var logits;
        if (cfg_.mixing == MixingMode::ModelII) {
          const Var pv = g_.input(posenc_);
          logits = g_.matmul(g_.matmul(pv, q), g_.transpose(g_.matmul(pv, k)));
        } else {
          logits = g_.matmul(q, g_.transpose(k));
        }
        map = g_.tile_rows(g_.softmax_rows(logits, cfg_.attention_scale()), batch);
      }
      if (trace) maps.push_back(g_.value(map));
      outs.push_back(g_.block_matmul(map, g_.slice_cols(values, h * kh, kh), batch));
    }
    if (trace) trace->maps.push_back(std::move(maps));
    const Var merged = g_.concat_cols(outs);
    return cfg_.use_value ? g_.matmul(merged, param(p + "o")) : merged;
  }

  /// patches: (B*N) x (p*p*C). Returns B x classes logits.
  Var forward(const Matrix& patches, std::size_t batch, ForwardTrace* trace = nullptr) {
    const std::size_t n = cfg_.tokens();
    require(patches.rows() == batch * n && patches.cols() == cfg_.patch_features(),
            "forward: patch matrix has shape " + patches.shape_string());
    Var x = g_.add_row(g_.matmul(g_.input(patches), param("embed.w")), param("embed.b"));
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const Var h1 = g_.layer_norm(x, param(p + "ln1.g"), param(p + "ln1.b"));
      x = g_.add(x, spatial_mix(l, h1, batch, trace));
      const Var h2 = g_.layer_norm(x, param(p + "ln2.g"), param(p + "ln2.b"));
      Var m = g_.gelu(g_.add_row(g_.matmul(h2, param(p + "mlp.w1")), param(p + "mlp.b1")));
      m = g_.add_row(g_.matmul(m, param(p + "mlp.w2")), param(p + "mlp.b2"));
      x = g_.add(x, m);
      require(g_.value(x).all_finite(), "non-finite activations in layer " + std::to_string(l));
    }
    const Var pooled = g_.mean_pool_blocks(x, batch);
    const Var normed = g_.layer_norm(pooled, param("final_ln.g"), param("final_ln.b"));
    return g_.add_row(g_.matmul(normed, param("head.w")), param("head.b"));
  }

  const Matrix& posenc() const { return posenc_; }

 private:
  Matrix tiled_posenc(std::size_t batch) const {
    Matrix out(posenc_.rows() * batch, posenc_.cols());
    for (std::size_t b = 0; b < batch; ++b)
      std::copy(posenc_.data().begin(), posenc_.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(b * posenc_.size()));
    return out;
  }

  Graph& g_;
  const ModelState& st_;
  const ModelConfig& cfg_;
  Matrix posenc_;
  std::unordered_map<std::string, Var> vars_;
};

/// Tensor-level spatial mixing of one image's tokens (N x D).
inline Matrix spatial_mix(const ModelState& state, std::size_t layer, const Matrix& tokens) {
  Graph g;
  ModelGraph mg(g, state);
  return g.value(mg.spatial_mix(layer, g.input(tokens), 1));
}

/// Logits for a batch of patch matrices; no gradients are kept.
inline Matrix forward_classify(const ModelState& state, const Matrix& patches, std::size_t batch,
                               ForwardTrace* trace = nullptr) {
  Graph g;
  ModelGraph mg(g, state);
  return g.value(mg.forward(patches, batch, trace));
}

inline Checkpoint model_checkpoint(const ModelState& state, const KeyValues& extra = {}) {
  Checkpoint ckpt;
  ckpt.tensors = state.params;
  ckpt.metadata.set("kind", "model");
  state.config.write(ckpt.metadata);
  for (const auto& [k, v] : extra.entries()) ckpt.metadata.set(k, v);
  return ckpt;
}

/// Rebuilds a model from a checkpoint written by model_checkpoint.
inline ModelState model_from_checkpoint(const Checkpoint& ckpt) {
  require(ckpt.metadata.contains("kind") && ckpt.metadata.get("kind") == "model",
          "checkpoint does not hold a model");
  ModelConfig config;
  config.read(ckpt.metadata);
  config.validate();
  // Shapes and the trainable set come from a fresh random init of the same config.
  ModelConfig shape_cfg = config;
  shape_cfg.init = InitStrategy::Random;
  ModelState st = init_model(shape_cfg);
  st.config = config;
  for (auto& [name, m] : st.params) {
    const Matrix& stored = ckpt.tensors.at(name);
    require(stored.same_shape(m), "checkpoint tensor '" + name + "' has the wrong shape");
    m = stored;
  }
  require(ckpt.tensors.size() == st.params.size(), "checkpoint has unexpected tensors");
  return st;
}

}  // namespace ivit
