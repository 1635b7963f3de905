#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cnntention/layers.hpp"
#include "cnntention/tensor.hpp"

namespace cnntention {

// Default normalization constants, frozen from the train-set statistics
// (see tests/data: the oracle recomputes them from the real files).
inline const std::vector<float> kCifar10Mean{0.4914f, 0.4822f, 0.4465f};
inline const std::vector<float> kCifar10Std{0.2470f, 0.2435f, 0.2616f};
inline const std::vector<float> kMnistMean{0.13066047f};
inline const std::vector<float> kMnistStd{0.30810780f};

// Images as loaded from disk: pixel values scaled to [0, 1], no normalization.
struct RawImages {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> images;  // count * C * H * W
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
};

// A normalized split ready for batching.
struct Dataset {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> images;
  std::vector<int> labels;
  std::string split;               // train | val | test
  std::vector<float> mean, stdev;  // per-channel constants applied

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "data: cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 10000 records per file, each 1 label byte +
// 3072 pixel bytes (R, G, B planes of a 32x32 image).
// ---------------------------------------------------------------------------

struct Cifar10Files {
  RawImages train;  // 50k
  RawImages test;   // 10k
};

inline bool cifar10_present(const std::string& dir) {
  namespace fs = std::filesystem;
  for (int i = 1; i <= 5; ++i)
    if (!fs::exists(fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin"))) return false;
  return fs::exists(fs::path(dir) / "test_batch.bin");
}

inline void parse_cifar10_batch(const std::filesystem::path& path, RawImages& out) {
  constexpr std::size_t kRecord = 3073, kCount = 10000, kPixels = 3072;
  auto bytes = detail::read_file(path);
  require(bytes.size() == kRecord * kCount,
          "data: '" + path.string() + "' has " + std::to_string(bytes.size()) +
              " bytes, expected " + std::to_string(kRecord * kCount));
  out.channels = 3;
  out.height = out.width = 32;
  out.images.reserve(out.images.size() + kCount * kPixels);
  out.labels.reserve(out.labels.size() + kCount);
  for (std::size_t r = 0; r < kCount; ++r) {
    const unsigned char* rec = bytes.data() + r * kRecord;
    const int label = rec[0];
    require(label >= 0 && label <= 9,
            "data: '" + path.string() + "' record " + std::to_string(r) + " has label " +
                std::to_string(label) + " outside [0, 9]");
    out.labels.push_back(label);
    for (std::size_t i = 0; i < kPixels; ++i)
      out.images.push_back(static_cast<float>(rec[1 + i]) / 255.0f);
  }
}

inline Cifar10Files load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  Cifar10Files out;
  for (int i = 1; i <= 5; ++i)
    parse_cifar10_batch(fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin"), out.train);
  parse_cifar10_batch(fs::path(dir) / "test_batch.bin", out.test);
  return out;
}

// ---------------------------------------------------------------------------
// MNIST IDX files: big-endian headers, magic 2051 (images) / 2049 (labels).
// ---------------------------------------------------------------------------

struct MnistFiles {
  RawImages train;  // 60k
  RawImages test;   // 10k
};

inline bool mnist_present(const std::string& dir) {
  namespace fs = std::filesystem;
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"})
    if (!fs::exists(fs::path(dir) / f)) return false;
  return true;
}

inline RawImages parse_idx_pair(const std::filesystem::path& image_path,
                                const std::filesystem::path& label_path) {
  auto img = detail::read_file(image_path);
  require(img.size() >= 16, "data: '" + image_path.string() + "' truncated header");
  const std::uint32_t magic = detail::read_be32(img.data());
  require(magic == 2051, "data: '" + image_path.string() + "' has magic " +
                             std::to_string(magic) + ", expected 2051");
  const std::size_t n = detail::read_be32(img.data() + 4);
  const std::size_t h = detail::read_be32(img.data() + 8);
  const std::size_t w = detail::read_be32(img.data() + 12);
  require(img.size() == 16 + n * h * w,
          "data: '" + image_path.string() + "' has " + std::to_string(img.size()) +
              " bytes, header promises " + std::to_string(16 + n * h * w));

  auto lab = detail::read_file(label_path);
  require(lab.size() >= 8, "data: '" + label_path.string() + "' truncated header");
  const std::uint32_t lmagic = detail::read_be32(lab.data());
  require(lmagic == 2049, "data: '" + label_path.string() + "' has magic " +
                              std::to_string(lmagic) + ", expected 2049");
  const std::size_t ln = detail::read_be32(lab.data() + 4);
  require(ln == n, "data: '" + label_path.string() + "' has " + std::to_string(ln) +
                       " labels for " + std::to_string(n) + " images");
  require(lab.size() == 8 + ln, "data: '" + label_path.string() + "' truncated payload");

  RawImages out;
  out.channels = 1;
  out.height = h;
  out.width = w;
  out.images.resize(n * h * w);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n * h * w; ++i)
    out.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = lab[8 + i];
    require(label >= 0 && label <= 9, "data: '" + label_path.string() + "' label " +
                                          std::to_string(label) + " outside [0, 9]");
    out.labels[i] = label;
  }
  return out;
}

inline MnistFiles load_mnist(const std::string& dir) {
  namespace fs = std::filesystem;
  MnistFiles out;
  out.train = parse_idx_pair(fs::path(dir) / "train-images-idx3-ubyte",
                             fs::path(dir) / "train-labels-idx1-ubyte");
  out.test = parse_idx_pair(fs::path(dir) / "t10k-images-idx3-ubyte",
                            fs::path(dir) / "t10k-labels-idx1-ubyte");
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and splits
// ---------------------------------------------------------------------------

struct ChannelStats {
  std::vector<float> mean, stdev;
};

inline ChannelStats compute_normalization(const RawImages& images) {
  const std::size_t c = images.channels, hw = images.height * images.width;
  const std::size_t n = images.count();
  ChannelStats stats;
  stats.mean.assign(c, 0.0f);
  stats.stdev.assign(c, 0.0f);
  std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = images.images.data() + (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum[ch] += p[i];
        sumsq[ch] += static_cast<double>(p[i]) * p[i];
      }
    }
  const double total = static_cast<double>(n) * hw;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double m = sum[ch] / total;
    const double var = sumsq[ch] / total - m * m;
    stats.mean[ch] = static_cast<float>(m);
    stats.stdev[ch] = static_cast<float>(std::sqrt(var > 0 ? var : 0));
  }
  return stats;
}

inline Dataset normalize(const RawImages& raw, const std::vector<float>& mean,
                         const std::vector<float>& stdev, std::string split) {
  require(mean.size() == raw.channels && stdev.size() == raw.channels,
          "normalize: constants have " + std::to_string(mean.size()) + " channels, images have " +
              std::to_string(raw.channels));
  Dataset ds;
  ds.channels = raw.channels;
  ds.height = raw.height;
  ds.width = raw.width;
  ds.labels = raw.labels;
  ds.split = std::move(split);
  ds.mean = mean;
  ds.stdev = stdev;
  ds.images.resize(raw.images.size());
  const std::size_t hw = raw.height * raw.width;
  for (std::size_t s = 0; s < raw.count(); ++s)
    for (std::size_t ch = 0; ch < raw.channels; ++ch) {
      const float* src = raw.images.data() + (s * raw.channels + ch) * hw;
      float* dst = ds.images.data() + (s * raw.channels + ch) * hw;
      const float inv = 1.0f / std::max(stdev[ch], 1e-8f);
      for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - mean[ch]) * inv;
    }
  return ds;
}

namespace detail {

// Deterministic Fisher-Yates, independent of standard-library distributions.
inline void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t key) {
  std::uint64_t state = key;
  for (std::size_t i = idx.size(); i > 1; --i) {
    state = splitmix64(state);
    std::swap(idx[i - 1], idx[state % i]);
  }
}

}  // namespace detail

// Disjoint, exhaustive shuffled split of the raw training set.
inline std::pair<RawImages, RawImages> split_train_val(const RawImages& raw,
                                                       std::size_t val_count,
                                                       std::uint64_t seed) {
  require(val_count < raw.count(), "split_train_val: validation count " +
                                       std::to_string(val_count) + " >= dataset size " +
                                       std::to_string(raw.count()));
  std::vector<std::size_t> idx(raw.count());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  detail::shuffle_indices(idx, splitmix64(seed ^ 0x5eedull));

  auto gather = [&](std::size_t begin, std::size_t end) {
    RawImages out;
    out.channels = raw.channels;
    out.height = raw.height;
    out.width = raw.width;
    const std::size_t isz = raw.image_size();
    out.images.resize((end - begin) * isz);
    out.labels.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      std::copy_n(raw.images.data() + idx[i] * isz, isz, out.images.data() + (i - begin) * isz);
      out.labels[i - begin] = raw.labels[idx[i]];
    }
    return out;
  };
  const std::size_t train_count = raw.count() - val_count;
  return {gather(0, train_count), gather(train_count, raw.count())};
}

// ---------------------------------------------------------------------------
// Batching with deterministic per-(seed, epoch) shuffling and per-sample
// augmentation (horizontal flip p=0.5, then a crop of the zero-padded
// image). The last partial batch is kept.
// ---------------------------------------------------------------------------

struct AugmentationConfig {
  bool horizontal_flip = true;
  std::size_t pad = 4;
};

inline void flip_horizontal(const float* src, float* dst, std::size_t c, std::size_t h,
                            std::size_t w) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        dst[(ch * h + i) * w + j] = src[(ch * h + i) * w + (w - 1 - j)];
}

// Crop of the zero-padded image at offset (oy, ox) in [0, 2*pad]^2; the
// center offset (pad, pad) reproduces the original image.
inline void crop_padded(const float* src, float* dst, std::size_t c, std::size_t h, std::size_t w,
                        std::size_t pad, std::size_t oy, std::size_t ox) {
  require(oy <= 2 * pad && ox <= 2 * pad, "crop_padded: offset outside padded range");
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i) {
      const std::ptrdiff_t si =
          static_cast<std::ptrdiff_t>(i + oy) - static_cast<std::ptrdiff_t>(pad);
      for (std::size_t j = 0; j < w; ++j) {
        const std::ptrdiff_t sj =
            static_cast<std::ptrdiff_t>(j + ox) - static_cast<std::ptrdiff_t>(pad);
        dst[(ch * h + i) * w + j] =
            (si >= 0 && si < static_cast<std::ptrdiff_t>(h) && sj >= 0 &&
             sj < static_cast<std::ptrdiff_t>(w))
                ? src[(ch * h + si) * w + sj]
                : 0.0f;
      }
    }
}

namespace detail {

inline void augment_image(const float* src, float* dst, float* scratch, std::size_t c,
                          std::size_t h, std::size_t w, const AugmentationConfig& aug,
                          std::uint64_t key) {
  const std::uint64_t r0 = splitmix64(key);
  const std::uint64_t r1 = splitmix64(r0);
  const std::uint64_t r2 = splitmix64(r1);
  const float* stage = src;
  if (aug.horizontal_flip && (r0 & 1ull)) {
    flip_horizontal(src, scratch, c, h, w);
    stage = scratch;
  }
  const std::size_t span = 2 * aug.pad + 1;
  crop_padded(stage, dst, c, h, w, aug.pad, aug.pad == 0 ? 0 : r1 % span,
              aug.pad == 0 ? 0 : r2 % span);
}

}  // namespace detail

// Calls fn(images BCHW, labels) for every batch of one epoch.
template <typename Fn>
void for_each_batch(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                    std::size_t epoch, const AugmentationConfig* aug, Fn&& fn) {
  require(batch_size >= 1, "for_each_batch: batch size must be >= 1");
  std::vector<std::size_t> order(ds.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  detail::shuffle_indices(order, splitmix64(seed) ^ splitmix64(epoch * 0x9e3779b97f4a7c15ull));

  const std::size_t isz = ds.image_size();
  std::vector<float> scratch(isz);
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - begin);
    Tensor<float> images(Shape{n, ds.channels, ds.height, ds.width});
    std::vector<int> labels(n);
    auto iv = images.mutable_value();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = order[begin + i];
      labels[i] = ds.labels[src];
      if (aug) {
        const std::uint64_t key =
            splitmix64(seed ^ splitmix64(epoch + 1)) ^ splitmix64(begin + i);
        detail::augment_image(ds.images.data() + src * isz, iv.data() + i * isz, scratch.data(),
                              ds.channels, ds.height, ds.width, *aug, key);
      } else {
        std::copy_n(ds.images.data() + src * isz, isz, iv.data() + i * isz);
      }
    }
    fn(images, labels);
  }
}

// ---------------------------------------------------------------------------
// Bundles: load, normalize with the frozen constants, split.
// use_val=false trains on the full training set and reports validation
// metrics on the test split (the paper's headline mode).
// ---------------------------------------------------------------------------

struct DataBundle {
  Dataset train, val, test;
  bool augment_train = false;
};

inline DataBundle make_bundle(const RawImages& raw_train, const RawImages& raw_test,
                              const std::vector<float>& mean, const std::vector<float>& stdev,
                              std::size_t val_count, std::uint64_t seed, bool use_val) {
  DataBundle out;
  out.test = normalize(raw_test, mean, stdev, "test");
  if (use_val) {
    auto [tr, val] = split_train_val(raw_train, val_count, seed);
    out.train = normalize(tr, mean, stdev, "train");
    out.val = normalize(val, mean, stdev, "val");
  } else {
    out.train = normalize(raw_train, mean, stdev, "train");
    out.val = out.test;
    out.val.split = "val";
  }
  return out;
}

inline DataBundle load_cifar10_bundle(const std::string& dir, std::uint64_t seed,
                                      bool use_val = true) {
  auto files = load_cifar10(dir);
  DataBundle out =
      make_bundle(files.train, files.test, kCifar10Mean, kCifar10Std, 5000, seed, use_val);
  out.augment_train = true;
  return out;
}

inline DataBundle load_mnist_bundle(const std::string& dir, std::uint64_t seed,
                                    bool use_val = true) {
  auto files = load_mnist(dir);
  return make_bundle(files.train, files.test, kMnistMean, kMnistStd, 5000, seed, use_val);
}

}  // namespace cnntention
