#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ivit/checkpoint.hpp"
#include "ivit/matrix.hpp"
#include "ivit/random.hpp"

namespace ivit {

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Byte images stored height x width x channels, channel fastest.
struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t classes = 0;
  std::vector<std::vector<std::uint8_t>> images;
  std::vector<int> labels;
  std::string split;
  Normalization norm;

  std::size_t size() const { return labels.size(); }
  std::size_t pixel_count() const { return height * width * channels; }

  void validate() const {
    require(images.size() == labels.size(), "dataset: images and labels differ in count");
    for (std::size_t i = 0; i < images.size(); ++i) {
      require(images[i].size() == pixel_count(), "dataset: image " + std::to_string(i) + " has the wrong size");
      require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes,
              "dataset: label out of range at index " + std::to_string(i));
    }
  }
};

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

/// Parses CIFAR-10 binary records: one label byte, then the red, green and
/// blue 32x32 planes, each row-major.
inline Dataset parse_cifar10_binary(const std::vector<std::uint8_t>& bytes, const std::string& split = "train") {
  require(bytes.size() % kCifarRecord == 0,
          "cifar10: truncated file (" + std::to_string(bytes.size()) + " bytes is not a multiple of 3073)");
  Dataset ds;
  ds.height = ds.width = kCifarSide;
  ds.channels = 3;
  ds.classes = 10;
  ds.split = split;
  const std::size_t plane = kCifarSide * kCifarSide;
  const std::size_t records = bytes.size() / kCifarRecord;
  ds.images.reserve(records);
  ds.labels.reserve(records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    require(rec[0] <= 9, "cifar10: label byte " + std::to_string(rec[0]) + " > 9 in record " + std::to_string(r));
    std::vector<std::uint8_t> img(3 * plane);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) img[p * 3 + c] = rec[1 + c * plane + p];
    ds.images.push_back(std::move(img));
    ds.labels.push_back(rec[0]);
  }
  return ds;
}

inline Dataset load_cifar10_binary(const std::filesystem::path& path, const std::string& split = "train") {
  try {
    return parse_cifar10_binary(read_file_bytes(path), split);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

/// Concatenates data_batch_1..5.bin (train) or test_batch.bin (test).
inline Dataset load_cifar10_dir(const std::filesystem::path& dir, const std::string& split) {
  if (split == "test") return load_cifar10_binary(dir / "test_batch.bin", "test");
  Dataset all;
  for (int b = 1; b <= 5; ++b) {
    Dataset part = load_cifar10_binary(dir / ("data_batch_" + std::to_string(b) + ".bin"), "train");
    if (b == 1) {
      all = std::move(part);
      continue;
    }
    std::move(part.images.begin(), part.images.end(), std::back_inserter(all.images));
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Noise images with one bright 4x4 blob centred in a quadrant; the label is
/// the quadrant index (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
inline Dataset make_synthetic_quadrant_dataset(std::size_t n, std::size_t grid = 16, std::uint64_t seed = 0,
                                               std::size_t channels = 1, const std::string& split = "train") {
  require(n >= 4, "quadrant dataset needs n >= 4");
  require(grid >= 8 && grid % 2 == 0, "quadrant dataset needs an even grid of at least 8");
  require(channels > 0, "quadrant dataset needs at least one channel");
  Dataset ds;
  ds.height = ds.width = grid;
  ds.channels = channels;
  ds.classes = 4;
  ds.split = split;
  Rng rng = stream(seed, "quadrant." + split);
  std::uniform_real_distribution<double> background(0.0, 0.2), blob(0.8, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 4);
    const std::size_t cy = (label / 2) * (grid / 2) + grid / 4;
    const std::size_t cx = (label % 2) * (grid / 2) + grid / 4;
    std::vector<std::uint8_t> img(grid * grid * channels);
    for (std::size_t y = 0; y < grid; ++y)
      for (std::size_t x = 0; x < grid; ++x) {
        const bool inside = y + 2 >= cy && y < cy + 2 && x + 2 >= cx && x < cx + 2;
        for (std::size_t c = 0; c < channels; ++c)
          img[(y * grid + x) * channels + c] = to_byte(inside ? blob(rng) : background(rng));
      }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

/// Per-channel mean and standard deviation of pixel values scaled to [0,1].
inline Normalization compute_normalization(const Dataset& train) {
  require(train.size() > 0, "normalization needs a non-empty dataset");
  const std::size_t c = train.channels;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (const auto& img : train.images)
    for (std::size_t i = 0; i < img.size(); ++i) {
      const double v = img[i] / 255.0;
      sum[i % c] += v;
      sq[i % c] += v * v;
    }
  const double count = static_cast<double>(train.size() * train.height * train.width);
  Normalization norm;
  for (std::size_t k = 0; k < c; ++k) {
    const double mean = sum[k] / count;
    const double var = std::max(sq[k] / count - mean * mean, 0.0);
    norm.mean.push_back(mean);
    norm.stddev.push_back(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return norm;
}

struct Augmentation {
  bool flip = false;
  bool crop = false;
  std::size_t pad = 4;
};

/// Normalized, optionally augmented patches for the selected images:
/// (B*N) x (p*p*C), tokens row-major over the patch grid and features
/// ordered (row-in-patch, col-in-patch, channel). Crop padding is zero in
/// normalized units. Augmentation draws come from `rng` in image order.
inline Matrix make_patches(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t patch,
                           const Augmentation& aug = {}, Rng* rng = nullptr) {
  require(patch > 0 && ds.height % patch == 0 && ds.width % patch == 0, "patch size must divide the image sides");
  require(ds.norm.mean.size() == ds.channels, "dataset has no normalization stats");
  require(!(aug.flip || aug.crop) || rng != nullptr, "augmentation needs a random stream");
  const std::size_t gh = ds.height / patch, gw = ds.width / patch, c = ds.channels;
  const std::size_t features = patch * patch * c;
  Matrix out(indices.size() * gh * gw, features);
  const auto pad = static_cast<long>(aug.pad);
  std::uniform_int_distribution<long> shift(-pad, pad);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    require(indices[b] < ds.size(), "image index out of range");
    const auto& img = ds.images[indices[b]];
    bool flip = false;
    long dy = 0, dx = 0;
    if (aug.flip) flip = coin(*rng);
    if (aug.crop) {
      dy = shift(*rng);
      dx = shift(*rng);
    }
    for (std::size_t y = 0; y < ds.height; ++y)
      for (std::size_t x = 0; x < ds.width; ++x) {
        const long sy = static_cast<long>(y) + dy;
        long sx = static_cast<long>(x) + dx;
        if (flip) sx = static_cast<long>(ds.width) - 1 - sx;
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(ds.height) && sx < static_cast<long>(ds.width);
        const std::size_t row = b * gh * gw + (y / patch) * gw + x / patch;
        const std::size_t col0 = ((y % patch) * patch + x % patch) * c;
        for (std::size_t k = 0; k < c; ++k) {
          double v = 0.0;
          if (inside) {
            const double raw = img[(static_cast<std::size_t>(sy) * ds.width + static_cast<std::size_t>(sx)) * c + k] / 255.0;
            v = (raw - ds.norm.mean[k]) / ds.norm.stddev[k];
          }
          out(row, col0 + k) = v;
        }
      }
  }
  return out;
}

}  // namespace ivit
