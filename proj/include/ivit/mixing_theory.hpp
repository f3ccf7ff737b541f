#pragma once

// Brute-force check of the channel-mixing span argument: with a rank-k input
// X = Z A and D spatial filters h_i, one output channel is
//   y = sum_i sum_j w_i a_ji H_i z_j,
// so a mixing vector w reproduces a target filtering of every component z_j
// iff the aggregate filters sum_i w_i a_ji h_i hit the per-component targets.
// That is a linear system in w with k*f^2 equations and D unknowns.
// Activations, norms and skips are ignored throughout.

#include <cstdint>
#include <vector>

#include "ivit/filters.hpp"
#include "ivit/numerics.hpp"

namespace ivit {

/// True iff D >= k * f^2.
inline bool verify_condition(std::size_t d, std::size_t k, std::size_t f) {
  require(d > 0 && k > 0 && f > 0, "verify_condition: arguments must be positive");
  return d >= k * f * f;
}

struct SpanSystem {
  Matrix b;                     ///< (k f^2) x D, column i stacks vec(a_ji h_i) over j
  std::vector<double> targets;  ///< length k f^2, stacks vec(g_j)
  std::size_t d = 0, k = 0, f = 0;

  LeastSquaresResult solve() const { return least_squares_solve(b, targets); }
};

inline SpanSystem build_span_system(const FilterBank& bank, const Matrix& a,
                                    const std::vector<Filter2D>& target_filters) {
  const std::size_t d = a.cols(), k = a.rows();
  require(bank.channel_count == d, "build_span_system: bank channel count must equal D");
  require(target_filters.size() == k, "build_span_system: need one target filter per component");
  const std::size_t f = bank.filter_size();
  for (const auto& g : target_filters)
    require(g.size() == f, "build_span_system: target filter size mismatch");
  const std::size_t f2 = f * f;

  SpanSystem sys{Matrix(k * f2, d), std::vector<double>(k * f2), d, k, f};
  for (std::size_t i = 0; i < d; ++i) {
    const auto taps = bank.for_channel(i).taps().data();
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t t = 0; t < f2; ++t) sys.b(j * f2 + t, i) = a(j, i) * taps[t];
  }
  for (std::size_t j = 0; j < k; ++j) {
    const auto taps = target_filters[j].taps().data();
    std::copy(taps.begin(), taps.end(), sys.targets.begin() + static_cast<std::ptrdiff_t>(j * f2));
  }
  return sys;
}

struct EquivalenceResult {
  std::size_t rank = 0;
  double span_residual = 0.0;
  double functional_residual = 0.0;
  std::vector<double> w;
};

/// Solves the span system for the probe u = e_1 (the first input channel),
/// then measures || sum_i w_i H_i x_i - G x u || on the actual data.
inline EquivalenceResult channel_mixing_equivalence(const FilterBank& bank, const Matrix& x,
                                                    const Filter2D& target, Grid grid) {
  require(x.rows() == grid.tokens(), "channel_mixing_equivalence: x rows must equal grid tokens");
  require(x.cols() == bank.channel_count, "channel_mixing_equivalence: x columns must equal D");
  const LowRankFactors factors = low_rank_factorize(x);
  const std::size_t k = factors.rank();

  // With u = e_1 the target for component j is a_j1 * g.
  std::vector<Filter2D> targets;
  targets.reserve(k);
  for (std::size_t j = 0; j < k; ++j) targets.emplace_back(scale(target.taps(), factors.a(j, 0)));

  const SpanSystem sys = build_span_system(bank, factors.a, targets);
  const LeastSquaresResult sol = sys.solve();

  std::vector<Matrix> conv;
  conv.reserve(bank.heads());
  for (const auto& h : bank.filters) conv.push_back(to_conv_matrix(h, grid).matrix);
  const std::size_t per_head = bank.channel_count / bank.heads();

  const std::size_t n = grid.tokens();
  Matrix y(n, 1);
  for (std::size_t i = 0; i < bank.channel_count; ++i) {
    const Matrix& h = conv[i / per_head];
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += h(r, c) * x(c, i);
      y(r, 0) += sol.w[i] * s;
    }
  }
  const Matrix expected = matmul(to_conv_matrix(target, grid).matrix, slice_cols(x, 0, 1));
  return {k, sol.residual, frobenius_norm(subtract(y, expected)), sol.w};
}

struct SpanTrial {
  std::uint64_t seed = 0;
  double span_residual = 0.0;
  double functional_residual = 0.0;
  bool condition_holds = false;
};

/// One seeded instance: a D-filter bank of `kind` (one filter per channel),
/// a random rank-k input on `grid`, and a standard normal target filter.
inline SpanTrial run_span_trial(FilterKind kind, std::size_t d, std::size_t k, std::size_t f, Grid grid,
                                std::uint64_t seed) {
  std::optional<double> sigma;
  if (kind == FilterKind::Gaussian) sigma = 1.0;
  const FilterBank bank = generate_filter_bank(kind, f, d, d, seed, sigma);
  Rng xr = stream(seed, "x");
  const Matrix x = matmul(Matrix::normal(grid.tokens(), k, 1.0, xr), Matrix::normal(k, d, 1.0, xr));
  Rng tr = stream(seed, "target");
  const Filter2D target(Matrix::normal(f, f, 1.0, tr));
  const EquivalenceResult r = channel_mixing_equivalence(bank, x, target, grid);
  return {seed, r.span_residual, r.functional_residual, verify_condition(d, k, f)};
}

}  // namespace ivit
