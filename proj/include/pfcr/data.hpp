#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pfcr/errors.hpp"
#include "pfcr/tensor.hpp"

namespace pfcr {

template <typename T>
struct Dataset {
  Tensor<T> images;  // [n, C, H, W]
  std::vector<int> labels;
  std::string split = "train";
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }

  // Rows `idx` as a new dataset.
  Dataset subset(const std::vector<std::size_t>& idx) const {
    const std::size_t row = images.numel() / images.dim(0);
    Shape shape = images.shape();
    shape[0] = idx.size();
    std::vector<T> data(idx.size() * row);
    std::vector<int> lab(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.data().begin() + idx[i] * row, row, data.begin() + i * row);
      lab[i] = labels.at(idx[i]);
    }
    return {Tensor<T>(std::move(shape), std::move(data)), std::move(lab), split, num_classes};
  }

  Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return subset(idx);
  }
};

struct SyntheticOptions {
  std::size_t channels = 3;
  std::uint64_t pattern_seed = 1234;  // fixes the per-class templates
  std::size_t blobs_per_class = 3;
  double blob_sigma = 2.5;  // pixels
  double jitter = 2.0;      // max shift of the template, pixels
  double noise = 0.35;      // stddev of additive pixel noise
  std::size_t distractors = 0;    // class-independent blobs at random positions
  double distractor_amp = 0.0;    // their peak amplitude

  bool operator==(const SyntheticOptions&) const = default;
};

// Class-conditional Gaussian-blob images. Each class owns a fixed template
// (blob centres, widths and per-channel amplitudes drawn from pattern_seed);
// a sample is its class template, shifted and rescaled, plus pixel noise.
// Labels are drawn uniformly at random.
template <typename T>
Dataset<T> make_synthetic(std::size_t num_classes, std::size_t n, std::size_t image_size,
                          std::uint64_t seed, const SyntheticOptions& opt = {}) {
  if (num_classes == 0 || n == 0 || image_size == 0 || opt.channels == 0)
    throw ContractError("make_synthetic: sizes must be positive");
  struct Blob {
    double cx, cy, sigma;
    std::vector<double> amp;
  };
  std::mt19937_64 prng(opt.pattern_seed);
  std::uniform_real_distribution<double> pos(0.15 * double(image_size), 0.85 * double(image_size));
  std::uniform_real_distribution<double> amp(-1.0, 1.0);
  std::uniform_real_distribution<double> width(0.7, 1.3);
  std::vector<std::vector<Blob>> templates(num_classes);
  for (auto& blobs : templates)
    for (std::size_t b = 0; b < opt.blobs_per_class; ++b) {
      Blob blob{pos(prng), pos(prng), opt.blob_sigma * width(prng), {}};
      for (std::size_t c = 0; c < opt.channels; ++c) blob.amp.push_back(amp(prng));
      blobs.push_back(std::move(blob));
    }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> label_dist(0, int(num_classes) - 1);
  std::uniform_real_distribution<double> shift(-opt.jitter, opt.jitter);
  std::uniform_real_distribution<double> gain(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, opt.noise);
  std::uniform_real_distribution<double> dpos(0.0, double(image_size));
  const std::size_t hw = image_size * image_size, row = opt.channels * hw;
  Dataset<T> ds;
  ds.num_classes = num_classes;
  ds.labels.resize(n);
  std::vector<T> pixels(n * row);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = label_dist(rng);
    ds.labels[i] = y;
    const double dx = shift(rng), dy = shift(rng), g = gain(rng);
    T* img = pixels.data() + i * row;
    for (const auto& blob : templates[std::size_t(y)]) {
      const double cx = blob.cx + dx, cy = blob.cy + dy, inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
      for (std::size_t r = 0; r < image_size; ++r)
        for (std::size_t col = 0; col < image_size; ++col) {
          const double d2 = (double(col) - cx) * (double(col) - cx) + (double(r) - cy) * (double(r) - cy);
          const double v = g * std::exp(-d2 * inv);
          for (std::size_t c = 0; c < opt.channels; ++c)
            img[c * hw + r * image_size + col] += T(v * blob.amp[c]);
        }
    }
    for (std::size_t d = 0; d < opt.distractors; ++d) {
      const double cx = dpos(rng), cy = dpos(rng);
      const double inv = 1.0 / (2.0 * opt.blob_sigma * opt.blob_sigma);
      std::vector<double> a(opt.channels);
      for (auto& v : a) v = opt.distractor_amp * amp(rng);
      for (std::size_t r = 0; r < image_size; ++r)
        for (std::size_t col = 0; col < image_size; ++col) {
          const double d2 = (double(col) - cx) * (double(col) - cx) + (double(r) - cy) * (double(r) - cy);
          const double v = std::exp(-d2 * inv);
          for (std::size_t c = 0; c < opt.channels; ++c) img[c * hw + r * image_size + col] += T(v * a[c]);
        }
    }
    for (std::size_t k = 0; k < row; ++k) img[k] += T(noise(rng));
  }
  ds.images = Tensor<T>({n, opt.channels, image_size, image_size}, std::move(pixels));
  return ds;
}

namespace idx_detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open IDX file '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                          const std::string& path) {
  if (off + 4 > b.size())
    throw ParseError(path + ": truncated header at byte offset " + std::to_string(off) +
                     " (file has " + std::to_string(b.size()) + " bytes)");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace idx_detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Reads an IDX image file (and matching label file). Pixels are scaled to
// [0, 1]; images are centre-padded (or centre-cropped) to image_size and
// replicated over `channels`.
template <typename T>
Dataset<T> load_idx_images(const std::string& image_path, const std::string& label_path,
                           std::size_t image_size, std::size_t channels = 1,
                           std::size_t num_classes = 10) {
  using idx_detail::be32;
  const auto img = idx_detail::read_file(image_path);
  const auto magic = be32(img, 0, image_path);
  if (magic != kIdxImageMagic)
    throw ParseError(image_path + ": bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }() + " at byte offset 0, expected 0x00000803");
  const std::size_t n = be32(img, 4, image_path), rows = be32(img, 8, image_path),
                    cols = be32(img, 12, image_path);
  const std::size_t expected = 16 + n * rows * cols;
  if (img.size() < expected)
    throw ParseError(image_path + ": truncated payload, expected " + std::to_string(expected) +
                     " bytes but file has " + std::to_string(img.size()) +
                     " (data starts at byte offset 16)");

  const auto lab = idx_detail::read_file(label_path);
  const auto lmagic = be32(lab, 0, label_path);
  if (lmagic != kIdxLabelMagic)
    throw ParseError(label_path + ": bad magic at byte offset 0, expected 0x00000801");
  const std::size_t nl = be32(lab, 4, label_path);
  if (nl != n)
    throw ParseError(label_path + ": label count " + std::to_string(nl) +
                     " does not match image count " + std::to_string(n));
  if (lab.size() < 8 + nl)
    throw ParseError(label_path + ": truncated payload, expected " + std::to_string(8 + nl) +
                     " bytes but file has " + std::to_string(lab.size()));

  Dataset<T> ds;
  ds.num_classes = num_classes;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    if (std::size_t(ds.labels[i]) >= num_classes)
      throw ParseError(label_path + ": label " + std::to_string(ds.labels[i]) +
                       " at byte offset " + std::to_string(8 + i) + " exceeds class count");
  }
  const std::size_t hw = image_size * image_size;
  std::vector<T> pixels(n * channels * hw, T(0));
  const long off_r = (long(image_size) - long(rows)) / 2, off_c = (long(image_size) - long(cols)) / 2;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const long dr = long(r) + off_r, dc = long(c) + off_c;
        if (dr < 0 || dc < 0 || dr >= long(image_size) || dc >= long(image_size)) continue;
        const T v = T(img[16 + (i * rows + r) * cols + c]) / T(255);
        for (std::size_t ch = 0; ch < channels; ++ch)
          pixels[(i * channels + ch) * hw + std::size_t(dr) * image_size + std::size_t(dc)] = v;
      }
  ds.images = Tensor<T>({n, channels, image_size, image_size}, std::move(pixels));
  return ds;
}

// Number of reconstruction samples used when none is given: min(1024, n / 4).
inline std::size_t default_recon_count(std::size_t dataset_size) {
  return std::min<std::size_t>(1024, dataset_size / 4);
}

template <typename T>
struct CalibrationSplit {
  Dataset<T> calib;
  Dataset<T> recon;
  std::vector<std::size_t> calib_idx, recon_idx;
};

// Disjoint uniform subsets without replacement.
template <typename T>
CalibrationSplit<T> sample_calibration(const Dataset<T>& data, std::size_t n_calib,
                                       std::size_t n_recon, std::uint64_t seed) {
  if (n_calib == 0 || n_recon == 0) throw ContractError("sample_calibration: empty subset");
  if (n_calib + n_recon > data.size())
    throw ContractError("sample_calibration: need " + std::to_string(n_calib + n_recon) +
                        " samples, dataset has " + std::to_string(data.size()));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  CalibrationSplit<T> out;
  out.calib_idx.assign(order.begin(), order.begin() + long(n_calib));
  out.recon_idx.assign(order.begin() + long(n_calib), order.begin() + long(n_calib + n_recon));
  out.calib = data.subset(out.calib_idx);
  out.recon = data.subset(out.recon_idx);
  return out;
}

}  // namespace pfcr
