#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ivit/matrix.hpp"
#include "ivit/numerics.hpp"
#include "ivit/random.hpp"

namespace ivit {

/// Token grid of an image after patching; tokens are numbered row-major.
struct Grid {
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t tokens() const { return height * width; }
  bool operator==(const Grid&) const = default;
};

/// Odd-sized square filter anchored at its center tap.
class Filter2D {
 public:
  explicit Filter2D(Matrix taps) : taps_(std::move(taps)) {
    require(taps_.rows() == taps_.cols(), "filter must be square");
    require(taps_.rows() % 2 == 1, "filter size must be odd");
    require(taps_.all_finite(), "filter taps must be finite");
  }

  std::size_t size() const { return taps_.rows(); }
  std::size_t anchor() const { return size() / 2; }
  const Matrix& taps() const { return taps_; }
  double operator()(std::size_t u, std::size_t v) const { return taps_(u, v); }

  /// Taps flattened row-major into a 1 x f^2 row.
  Matrix vectorized() const { return Matrix(1, taps_.size(), taps_.values()); }

  double tap_sum() const {
    double s = 0.0;
    for (double v : taps_.data()) s += v;
    return s;
  }

  bool operator==(const Filter2D&) const = default;

 private:
  Matrix taps_;
};

inline Filter2D impulse_filter(std::size_t f, std::size_t row, std::size_t col) {
  require(row < f && col < f, "impulse position outside the filter");
  Matrix t(f, f);
  t(row, col) = 1.0;
  return Filter2D(std::move(t));
}

/// Peak 1 at (row, col); tap at offset d decays as exp(-|d|^2 / (2 sigma^2)).
inline Filter2D gaussian_filter(std::size_t f, std::size_t row, std::size_t col, double sigma) {
  require(sigma > 0.0 && std::isfinite(sigma), "gaussian sigma must be positive");
  require(row < f && col < f, "gaussian peak outside the filter");
  Matrix t(f, f);
  for (std::size_t u = 0; u < f; ++u)
    for (std::size_t v = 0; v < f; ++v) {
      const double du = static_cast<double>(u) - static_cast<double>(row);
      const double dv = static_cast<double>(v) - static_cast<double>(col);
      t(u, v) = std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
    }
  return Filter2D(std::move(t));
}

enum class FilterKind { Impulse, Random, Box, Gaussian, LearnedPlaceholder };

inline std::string to_string(FilterKind k) {
  switch (k) {
    case FilterKind::Impulse: return "impulse";
    case FilterKind::Random: return "random";
    case FilterKind::Box: return "box";
    case FilterKind::Gaussian: return "gaussian";
    case FilterKind::LearnedPlaceholder: return "learned-placeholder";
  }
  return "?";
}

inline FilterKind parse_filter_kind(const std::string& s) {
  if (s == "impulse") return FilterKind::Impulse;
  if (s == "random") return FilterKind::Random;
  if (s == "box") return FilterKind::Box;
  if (s == "gaussian") return FilterKind::Gaussian;
  if (s == "learned" || s == "learned-placeholder") return FilterKind::LearnedPlaceholder;
  throw Error("unknown filter kind '" + s + "'");
}

/// H distinct filters shared by blocks of channel_count / H channels.
struct FilterBank {
  FilterKind kind = FilterKind::Impulse;
  std::vector<Filter2D> filters;
  std::size_t channel_count = 0;
  std::uint64_t seed = 0;
  std::optional<double> gaussian_sigma;

  std::size_t heads() const { return filters.size(); }
  std::size_t filter_size() const { return filters.front().size(); }

  /// Channel c uses filter c / (C / H).
  const Filter2D& for_channel(std::size_t c) const {
    require(c < channel_count, "channel index out of range");
    return filters[c / (channel_count / heads())];
  }

  /// H x f^2 matrix of vectorized distinct filters.
  Matrix stacked() const {
    const std::size_t f2 = filter_size() * filter_size();
    Matrix m(heads(), f2);
    for (std::size_t h = 0; h < heads(); ++h)
      std::copy_n(filters[h].taps().data().begin(), f2, m.row(h).begin());
    return m;
  }
};

/// Draws a bank of `heads` filters of size f. Impulse and gaussian filters
/// pick a uniformly random peak per head; random (and the learned
/// placeholder) draw i.i.d. standard normal taps; box is all ones.
inline FilterBank generate_filter_bank(FilterKind kind, std::size_t f, std::size_t heads,
                                       std::size_t channel_count, std::uint64_t seed,
                                       std::optional<double> gaussian_sigma = std::nullopt) {
  require(f % 2 == 1, "filter size must be odd");
  require(heads >= 1 && channel_count % heads == 0, "heads must divide the channel count");
  require(gaussian_sigma.has_value() == (kind == FilterKind::Gaussian),
          kind == FilterKind::Gaussian ? "gaussian filters require a sigma"
                                       : "sigma is only valid for gaussian filters");
  FilterBank bank{kind, {}, channel_count, seed, gaussian_sigma};
  Rng rng(mix_seed(seed));
  std::uniform_int_distribution<std::size_t> position(0, f * f - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t h = 0; h < heads; ++h) {
    switch (kind) {
      case FilterKind::Impulse: {
        const std::size_t p = position(rng);
        bank.filters.push_back(impulse_filter(f, p / f, p % f));
        break;
      }
      case FilterKind::Gaussian: {
        const std::size_t p = position(rng);
        bank.filters.push_back(gaussian_filter(f, p / f, p % f, *gaussian_sigma));
        break;
      }
      case FilterKind::Random:
      case FilterKind::LearnedPlaceholder: {
        Matrix t(f, f);
        for (double& v : t.data()) v = normal(rng);
        bank.filters.emplace_back(std::move(t));
        break;
      }
      case FilterKind::Box:
        bank.filters.emplace_back(Matrix(f, f, 1.0));
        break;
    }
  }
  return bank;
}

/// N x N mixing matrix realizing wrap-around cross-correlation with `filter`
/// on a row-major token grid:
///   y(i, j) = sum_{u,v} h(u, v) * x((i + u - a) mod H, (j + v - a) mod W)
/// where a is the anchor. Entry (r, c) accumulates every tap that maps
/// token c onto token r, so taps that wrap onto the same token add up.
struct ConvMatrix {
  Grid grid;
  Matrix matrix;
};

inline ConvMatrix to_conv_matrix(const Filter2D& filter, Grid grid) {
  require(grid.height >= 1 && grid.width >= 1, "grid dimensions must be positive");
  const std::size_t n = grid.tokens();
  const auto h = static_cast<std::ptrdiff_t>(grid.height);
  const auto w = static_cast<std::ptrdiff_t>(grid.width);
  const auto a = static_cast<std::ptrdiff_t>(filter.anchor());
  const auto f = static_cast<std::ptrdiff_t>(filter.size());
  ConvMatrix out{grid, Matrix(n, n)};
  for (std::ptrdiff_t i = 0; i < h; ++i)
    for (std::ptrdiff_t j = 0; j < w; ++j)
      for (std::ptrdiff_t u = 0; u < f; ++u)
        for (std::ptrdiff_t v = 0; v < f; ++v) {
          const double tap = filter(static_cast<std::size_t>(u), static_cast<std::size_t>(v));
          if (tap == 0.0) continue;
          const std::ptrdiff_t si = ((i + u - a) % h + h) % h;
          const std::ptrdiff_t sj = ((j + v - a) % w + w) % w;
          out.matrix(static_cast<std::size_t>(i * w + j), static_cast<std::size_t>(si * w + sj)) += tap;
        }
  return out;
}

inline std::vector<ConvMatrix> to_conv_matrices(const FilterBank& bank, Grid grid) {
  std::vector<ConvMatrix> out;
  out.reserve(bank.heads());
  for (const auto& f : bank.filters) out.push_back(to_conv_matrix(f, grid));
  return out;
}

/// n x n matrix with a single 1 per row at an independently uniform column.
/// Rows may collide, so this is generally not a permutation.
inline Matrix random_permutation_matrix(std::size_t n, std::uint64_t seed) {
  require(n >= 1, "random_permutation_matrix: n must be positive");
  Rng rng(mix_seed(seed));
  std::uniform_int_distribution<std::size_t> column(0, n - 1);
  Matrix m(n, n);
  for (std::size_t r = 0; r < n; ++r) m(r, column(rng)) = 1.0;
  return m;
}

/// Relative singular-value cutoff for filter independence. Gaussian banks are
/// positive definite for every sigma, so exact rank is always full; what
/// matters is how many directions survive at a precision a network can use.
inline constexpr double kFilterRankTolerance = 1e-3;

/// Effective rank of the bank's distinct filters.
inline std::size_t bank_independence(const FilterBank& bank, double rel_tol = kFilterRankTolerance) {
  return numerical_rank(bank.stacked(), rel_tol);
}

}  // namespace ivit
