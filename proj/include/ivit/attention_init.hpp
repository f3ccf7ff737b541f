#pragma once

// Fits per-head query/key weights so that a softmax attention map reproduces
// the wrap-around convolution matrix of a random impulse filter.
//
//   free mode:    M_h = softmax(sigma * Qh Kh^T),          Qh, Kh in R^{N x K}
//   posenc mode:  M_h = softmax(sigma * P Qh Kh^T P^T),    Qh, Kh in R^{D x D/H}
//
// Each head minimizes MSE(M_h, T_h) with Adam. In posenc mode Q and K are
// each projected back onto the Frobenius ball of radius eta after every
// step; without the cap the rank-deficient P drives their norms upward.

#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ivit/autodiff.hpp"
#include "ivit/checkpoint.hpp"
#include "ivit/filters.hpp"

namespace ivit {

struct PositionalEncoding {
  Grid grid;
  std::size_t dim = 0;
  double temperature = 10000.0;
  Matrix p;  ///< N x dim
};

/// 2D sin/cos encoding. For token (row, col) and frequency
/// w_j = temperature^(-4j/dim), j < dim/4, the feature row is
///   [sin(row w) | cos(row w) | sin(col w) | cos(col w)].
inline PositionalEncoding sincos_posenc_2d(Grid grid, std::size_t dim, double temperature = 10000.0) {
  require(dim > 0 && dim % 4 == 0, "positional encoding dim must be divisible by 4");
  require(grid.height >= 1 && grid.width >= 1, "grid dimensions must be positive");
  require(temperature > 0.0, "positional encoding temperature must be positive");
  const std::size_t quarter = dim / 4;
  PositionalEncoding pe{grid, dim, temperature, Matrix(grid.tokens(), dim)};
  for (std::size_t r = 0; r < grid.height; ++r)
    for (std::size_t c = 0; c < grid.width; ++c) {
      auto row = pe.p.row(r * grid.width + c);
      for (std::size_t j = 0; j < quarter; ++j) {
        const double omega =
            std::pow(temperature, -4.0 * static_cast<double>(j) / static_cast<double>(dim));
        const double x = static_cast<double>(r) * omega;
        const double y = static_cast<double>(c) * omega;
        row[j] = std::sin(x);
        row[quarter + j] = std::cos(x);
        row[2 * quarter + j] = std::sin(y);
        row[3 * quarter + j] = std::cos(y);
      }
    }
  return pe;
}

/// Z = alpha X + (1 - alpha) P.
inline Matrix blend(double alpha, const Matrix& x, const Matrix& p) {
  require(alpha >= 0.0 && alpha <= 1.0, "blend: alpha must lie in [0,1]");
  detail::require_same_shape(x, p, "blend");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = alpha * x.data()[i] + (1.0 - alpha) * p.data()[i];
  return out;
}

enum class FitMode { Free, Posenc };

inline std::string to_string(FitMode m) { return m == FitMode::Free ? "free" : "posenc"; }

inline FitMode parse_fit_mode(const std::string& s) {
  if (s == "free") return FitMode::Free;
  if (s == "posenc") return FitMode::Posenc;
  throw Error("unknown fit mode '" + s + "'");
}

struct FitReport {
  double final_mse = 0.0;
  std::size_t epochs = 0;
  double argmax_match = 0.0;
  /// Head-averaged loss before each Adam step (length = epochs).
  std::vector<double> loss_history;
  /// Largest Frobenius norm of any head's Q (resp. K) seen after a step.
  double max_q_norm = 0.0;
  double max_k_norm = 0.0;
};

struct FitOptions {
  FitMode mode = FitMode::Free;
  double sigma = 1.0;
  std::optional<double> eta;
  double lr = 1e-4;
  std::size_t epochs = 10000;
  std::uint64_t seed = 0;
  /// Per-head width K in free mode. Posenc mode always uses D / H.
  std::size_t head_dim = 0;
  double init_std = 0.02;
  /// Fitting gradients scale like init_std / N^2, far below the usual 1e-8
  /// for N = 256, so the fitter uses a much smaller Adam epsilon.
  double adam_eps = 1e-16;
  /// 0 selects std::thread::hardware_concurrency().
  std::size_t threads = 0;
};

struct AttentionFactor {
  FitMode mode = FitMode::Free;
  std::vector<Matrix> q;
  std::vector<Matrix> k;
  double sigma = 1.0;
  std::optional<double> eta;
  FitReport report;

  std::size_t heads() const { return q.size(); }
  std::size_t head_dim() const { return q.front().cols(); }
};

/// Conv matrices of `heads` independent random impulse filters.
inline std::vector<Matrix> impulse_targets(Grid grid, std::size_t heads, std::size_t filter_size,
                                           std::uint64_t seed) {
  const FilterBank bank = generate_filter_bank(FilterKind::Impulse, filter_size, heads, heads, seed);
  std::vector<Matrix> out;
  for (auto& cm : to_conv_matrices(bank, grid)) out.push_back(std::move(cm.matrix));
  return out;
}

/// Scales m onto the Frobenius ball of radius eta; the result never exceeds
/// eta even after rounding.
inline void project_frobenius(Matrix& m, double eta) {
  double norm = frobenius_norm(m);
  while (norm > eta) {
    const double factor = std::nextafter(eta / norm, 0.0);
    for (double& v : m.data()) v *= factor;
    norm = frobenius_norm(m);
  }
}

namespace detail {

struct HeadResult {
  Matrix q, k;
  std::vector<double> losses;
  double final_mse = 0.0;
  std::size_t matches = 0;
  double max_q = 0.0, max_k = 0.0;
};

inline Var attention_logits(Graph& g, Var q, Var k, const Matrix* p) {
  if (p == nullptr) return g.matmul(q, g.transpose(k));
  const Var pv = g.input(*p);
  return g.matmul(g.matmul(pv, q), g.transpose(g.matmul(pv, k)));
}

inline HeadResult fit_head(const Matrix& target, const Matrix* p, const FitOptions& opt,
                           std::size_t head, std::size_t heads) {
  const std::size_t rows = p == nullptr ? target.rows() : p->cols();
  const std::size_t width = p == nullptr ? opt.head_dim : p->cols() / heads;
  Rng rng = stream(opt.seed, head);
  HeadResult res;
  NamedTensors params;
  params.set("q", Matrix::normal(rows, width, opt.init_std, rng));
  params.set("k", Matrix::normal(rows, width, opt.init_std, rng));
  AdamState adam(AdamOptions{opt.lr, 0.9, 0.999, opt.adam_eps});
  const double inv_heads = 1.0 / static_cast<double>(heads);
  res.losses.reserve(opt.epochs);

  for (std::size_t step = 0; step < opt.epochs; ++step) {
    Graph g;
    const Var q = g.parameter("q", params.at("q"));
    const Var k = g.parameter("k", params.at("k"));
    double loss_value = 0.0;
    try {
      const Var map = g.softmax_rows(attention_logits(g, q, k, p), opt.sigma);
      const Var loss = g.scale(g.mse_to_constant(map, target), inv_heads);
      loss_value = g.value(loss)(0, 0);
      require(std::isfinite(loss_value), "non-finite loss");
      adam.step(params, g.backward(loss).parameters());
    } catch (const Error& e) {
      throw Error("diverged at step " + std::to_string(step) + " (head " + std::to_string(head) +
                  "): " + e.what());
    }
    res.losses.push_back(loss_value);
    if (opt.eta) {
      project_frobenius(params.at("q"), *opt.eta);
      project_frobenius(params.at("k"), *opt.eta);
    }
    res.max_q = std::max(res.max_q, frobenius_norm(params.at("q")));
    res.max_k = std::max(res.max_k, frobenius_norm(params.at("k")));
  }

  res.q = params.at("q");
  res.k = params.at("k");
  const Matrix logits = p == nullptr ? matmul_nt(res.q, res.k) : matmul_nt(matmul(*p, res.q), matmul(*p, res.k));
  const Matrix map = softmax_rows(logits, opt.sigma);
  double se = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double d = map.data()[i] - target.data()[i];
    se += d * d;
  }
  res.final_mse = se / static_cast<double>(map.size());
  const auto got = row_argmax(map);
  const auto want = row_argmax(target);
  for (std::size_t r = 0; r < got.size(); ++r) res.matches += got[r] == want[r] ? 1 : 0;
  return res;
}

inline void require_stochastic(const Matrix& t) {
  require(t.rows() == t.cols(), "fit_attention_factorization: targets must be square");
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0.0;
    for (double v : t.row(r)) {
      require(v >= 0.0 && std::isfinite(v), "target rows not stochastic");
      s += v;
    }
    require(std::abs(s - 1.0) <= 1e-9, "target rows not stochastic");
  }
}

}  // namespace detail

/// Fits one (Q, K) pair per target. Heads are independent, so they run on
/// separate threads; results are merged in head order.
inline AttentionFactor fit_attention_factorization(const std::vector<Matrix>& targets, const FitOptions& opt,
                                                   const PositionalEncoding* pe = nullptr) {
  require(!targets.empty(), "fit_attention_factorization: no targets");
  require(opt.sigma > 0.0 && std::isfinite(opt.sigma), "invalid scale");
  require(opt.lr > 0.0, "fit_attention_factorization: learning rate must be positive");
  const std::size_t heads = targets.size();
  const std::size_t n = targets.front().rows();
  for (const auto& t : targets) {
    detail::require_stochastic(t);
    require(t.rows() == n, "fit_attention_factorization: targets differ in size");
  }
  const Matrix* p = nullptr;
  if (opt.mode == FitMode::Posenc) {
    require(pe != nullptr, "posenc mode requires a positional encoding");
    require(opt.eta.has_value() && *opt.eta > 0.0, "posenc mode requires a positive eta");
    require(pe->p.rows() == n, "positional encoding rows must match the target size");
    require(pe->dim % heads == 0, "heads must divide the encoding dim");
    p = &pe->p;
  } else {
    require(opt.head_dim > 0, "free mode requires a positive head_dim");
  }

  std::vector<detail::HeadResult> results(heads);
  std::vector<std::exception_ptr> errors(heads);
  const std::size_t workers = std::max<std::size_t>(
      1, std::min<std::size_t>(heads, opt.threads ? opt.threads : std::thread::hardware_concurrency()));
  auto run = [&](std::size_t worker) {
    for (std::size_t h = worker; h < heads; h += workers) {
      try {
        results[h] = detail::fit_head(targets[h], p, opt, h, heads);
      } catch (...) {
        errors[h] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  AttentionFactor factor;
  factor.mode = opt.mode;
  factor.sigma = opt.sigma;
  factor.eta = opt.mode == FitMode::Posenc ? opt.eta : std::nullopt;
  factor.report.epochs = opt.epochs;
  factor.report.loss_history.assign(opt.epochs, 0.0);
  std::size_t matches = 0;
  for (auto& r : results) {
    for (std::size_t s = 0; s < opt.epochs; ++s) factor.report.loss_history[s] += r.losses[s];
    factor.report.final_mse += r.final_mse / static_cast<double>(heads);
    factor.report.max_q_norm = std::max(factor.report.max_q_norm, r.max_q);
    factor.report.max_k_norm = std::max(factor.report.max_k_norm, r.max_k);
    matches += r.matches;
    factor.q.push_back(std::move(r.q));
    factor.k.push_back(std::move(r.k));
  }
  factor.report.argmax_match = static_cast<double>(matches) / static_cast<double>(heads * n);
  return factor;
}

/// Row-stochastic map per head. Free mode ignores z; posenc-mode factors
/// need the matrix entering the logits (P for the fitted maps, or a blend
/// of tokens and P).
inline std::vector<Matrix> attention_map(const AttentionFactor& factor, const Matrix* z = nullptr) {
  std::vector<Matrix> maps;
  for (std::size_t h = 0; h < factor.heads(); ++h) {
    if (factor.mode == FitMode::Free) {
      maps.push_back(softmax_rows(matmul_nt(factor.q[h], factor.k[h]), factor.sigma));
    } else {
      require(z != nullptr, "attention_map: posenc factors need an input matrix");
      require(z->cols() == factor.q[h].rows(), "attention_map: input width does not match Q");
      maps.push_back(softmax_rows(matmul_nt(matmul(*z, factor.q[h]), matmul(*z, factor.k[h])), factor.sigma));
    }
  }
  return maps;
}

/// Tensors "<prefix>head<h>.q" / ".k" for each head.
inline void store_factor(NamedTensors& out, const AttentionFactor& f, const std::string& prefix = "") {
  for (std::size_t h = 0; h < f.heads(); ++h) {
    out.set(prefix + "head" + std::to_string(h) + ".q", f.q[h]);
    out.set(prefix + "head" + std::to_string(h) + ".k", f.k[h]);
  }
}

inline void describe_factor(KeyValues& meta, const AttentionFactor& f, const std::string& prefix = "") {
  meta.set(prefix + "mode", to_string(f.mode));
  meta.set(prefix + "heads", static_cast<std::uint64_t>(f.heads()));
  meta.set(prefix + "sigma", f.sigma);
  if (f.eta) meta.set(prefix + "eta", *f.eta);
  meta.set(prefix + "final_mse", f.report.final_mse);
  meta.set(prefix + "epochs", static_cast<std::uint64_t>(f.report.epochs));
  meta.set(prefix + "argmax_match", f.report.argmax_match);
}

inline AttentionFactor load_factor(const Checkpoint& ckpt, const std::string& prefix = "") {
  const KeyValues& meta = ckpt.metadata;
  AttentionFactor f;
  f.mode = parse_fit_mode(meta.get(prefix + "mode"));
  f.sigma = meta.get_double(prefix + "sigma");
  if (meta.contains(prefix + "eta")) f.eta = meta.get_double(prefix + "eta");
  f.report.final_mse = meta.get_double(prefix + "final_mse");
  f.report.epochs = meta.get_uint(prefix + "epochs");
  f.report.argmax_match = meta.get_double(prefix + "argmax_match");
  const std::size_t heads = meta.get_uint(prefix + "heads");
  for (std::size_t h = 0; h < heads; ++h) {
    f.q.push_back(ckpt.tensors.at(prefix + "head" + std::to_string(h) + ".q"));
    f.k.push_back(ckpt.tensors.at(prefix + "head" + std::to_string(h) + ".k"));
  }
  return f;
}

}  // namespace ivit
