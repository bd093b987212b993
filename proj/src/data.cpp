// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "binio.hpp"
#include "libkd/error.hpp"

namespace libkd {

// ---- Dataset ---------------------------------------------------------------

Tensor Dataset::gather(std::span<const std::size_t> positions) const {
  const std::size_t per = images.numel() / std::max<std::size_t>(size(), 1);
  Shape shape = images.shape();
  shape[0] = positions.size();
  Tensor out = Tensor::zeros(shape);
  auto src = images.data<float>();
  auto dst = out.mutable_data<float>();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= size()) throw RangeError("dataset position " + std::to_string(positions[i]) + " out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(positions[i] * per), per,
                dst.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

void Dataset::validate() const {
  if (!images.defined() || images.dim() != 4 || images.dtype() != DType::f32) {
    throw ContractError("dataset images must be a float32 [N x C x H x W] tensor");
  }
  if (images.size(0) != labels.size() || sample_ids.size() != labels.size()) {
    throw ContractError("dataset: image, label and id counts differ");
  }
  for (std::size_t y : labels) {
    if (y >= num_classes) throw ContractError("dataset: label " + std::to_string(y) + " >= num_classes");
  }
  std::vector<std::uint64_t> ids = sample_ids;
  std::ranges::sort(ids);
  if (std::ranges::adjacent_find(ids) != ids.end()) throw ContractError("dataset: duplicate sample ids");
  if (channel_mean.size() != channels() || channel_std.size() != channels()) {
    throw ContractError("dataset: normalization statistics missing");
  }
}

std::pair<std::vector<double>, std::vector<double>> channel_statistics(const Tensor& images) {
  const std::size_t N = images.size(0), C = images.size(1), HW = images.size(2) * images.size(3);
  std::vector<double> mean(C, 0.0), sd(C, 0.0);
  auto x = images.data<float>();
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t p = 0; p < HW; ++p) s += x[(n * C + c) * HW + p];
    }
    mean[c] = s / static_cast<double>(N * HW);
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t p = 0; p < HW; ++p) {
        const double d = x[(n * C + c) * HW + p] - mean[c];
        v += d * d;
      }
    }
    sd[c] = std::sqrt(v / static_cast<double>(N * HW));
    if (sd[c] < 1e-6) sd[c] = 1.0;
  }
  return {mean, sd};
}

Tensor normalize_images(const Tensor& images, std::span<const double> mean, std::span<const double> sd) {
  const std::size_t C = images.size(1), HW = images.size(2) * images.size(3);
  if (mean.size() != C || sd.size() != C) throw DimensionError("normalize_images: statistics do not match channels");
  Tensor out = Tensor::zeros(images.shape());
  auto x = images.data<float>();
  auto y = out.mutable_data<float>();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / HW) % C;
    y[i] = static_cast<float>((x[i] - mean[c]) / sd[c]);
  }
  return out;
}

Tensor normalize_images(const Tensor& images, const Dataset& stats) {
  return normalize_images(images, stats.channel_mean, stats.channel_std);
}

std::array<std::uint8_t, 32> dataset_digest(const Dataset& ds) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("dataset_digest: SHA-256 unavailable");
  }
  auto feed = [&](const void* p, std::size_t n) { EVP_DigestUpdate(ctx, p, n); };
  for (std::size_t d : ds.images.shape()) {
    const auto v = static_cast<std::uint64_t>(d);
    feed(&v, 8);
  }
  const auto classes = static_cast<std::uint64_t>(ds.num_classes);
  feed(&classes, 8);
  feed(ds.sample_ids.data(), ds.sample_ids.size() * 8);
  for (std::size_t y : ds.labels) {
    const auto v = static_cast<std::uint64_t>(y);
    feed(&v, 8);
  }
  auto px = ds.images.data<float>();
  feed(px.data(), px.size() * sizeof(float));
  std::array<std::uint8_t, 32> out{};
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx, out.data(), &len);
  EVP_MD_CTX_free(ctx);
  return out;
}

// ---- CIFAR -----------------------------------------------------------------

namespace {

constexpr std::size_t kCifarChannels = 3;

struct CifarLayout {
  std::vector<std::string> train_files;
  std::string test_file;
  std::size_t label_bytes;
  std::size_t num_classes;
};

CifarLayout layout(CifarVariant v) {
  if (v == CifarVariant::cifar10) {
    return {{"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"},
            "test_batch.bin",
            1,
            10};
  }
  return {{"train.bin"}, "test.bin", 2, 100};
}

void read_records(const std::filesystem::path& file, const CifarLayout& lay, std::size_t pixels,
                  std::vector<std::uint8_t>& px, std::vector<std::size_t>& labels) {
  const auto bytes = binio::read_file(file);
  const std::size_t record = lay.label_bytes + pixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    const std::size_t expect = (bytes.size() / record + 1) * record;
    throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) + " bytes is not a multiple of the " +
                      std::to_string(record) + "-byte record (expected e.g. " + std::to_string(expect) + " bytes)");
  }
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    const std::size_t y = bytes[off + lay.label_bytes - 1];  // CIFAR-100: fine label is the second byte
    if (y >= lay.num_classes) {
      throw FormatError(file.string() + ": label " + std::to_string(y) + " at byte " + std::to_string(off) +
                        " exceeds " + std::to_string(lay.num_classes) + " classes");
    }
    labels.push_back(y);
    px.insert(px.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + lay.label_bytes),
              bytes.begin() + static_cast<std::ptrdiff_t>(off + record));
  }
}

Dataset dataset_from_bytes(const std::vector<std::uint8_t>& px, std::vector<std::size_t> labels, std::size_t C,
                           std::size_t S, std::size_t classes, Split split) {
  Dataset ds;
  const std::size_t N = labels.size();
  ds.images = Tensor::zeros({N, C, S, S});
  auto dst = ds.images.mutable_data<float>();
  for (std::size_t i = 0; i < px.size(); ++i) dst[i] = static_cast<float>(px[i]) / 255.0f;
  ds.labels = std::move(labels);
  ds.sample_ids.resize(N);
  std::iota(ds.sample_ids.begin(), ds.sample_ids.end(), std::uint64_t{0});
  ds.split = split;
  ds.num_classes = classes;
  return ds;
}

void attach_statistics(Dataset& train, Dataset& test) {
  auto [mean, sd] = channel_statistics(train.images);
  train.channel_mean = test.channel_mean = mean;
  train.channel_std = test.channel_std = sd;
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar_binary(const std::filesystem::path& dir, CifarVariant variant,
                                              std::size_t image_size) {
  const CifarLayout lay = layout(variant);
  const std::size_t pixels = kCifarChannels * image_size * image_size;
  std::vector<std::uint8_t> train_px, test_px;
  std::vector<std::size_t> train_y, test_y;
  for (const auto& f : lay.train_files) read_records(dir / f, lay, pixels, train_px, train_y);
  read_records(dir / lay.test_file, lay, pixels, test_px, test_y);
  Dataset train =
      dataset_from_bytes(train_px, std::move(train_y), kCifarChannels, image_size, lay.num_classes, Split::train);
  Dataset test =
      dataset_from_bytes(test_px, std::move(test_y), kCifarChannels, image_size, lay.num_classes, Split::test);
  attach_statistics(train, test);
  return {std::move(train), std::move(test)};
}

void save_cifar_binary(const Dataset& train, const Dataset& test, const std::filesystem::path& dir,
                       CifarVariant variant) {
  const CifarLayout lay = layout(variant);
  for (const Dataset* ds : {&train, &test}) {
    if (ds->channels() != kCifarChannels) throw ConfigError("save_cifar_binary: CIFAR layout needs 3 channels");
    if (ds->num_classes > lay.num_classes) throw ConfigError("save_cifar_binary: too many classes for variant");
  }
  std::filesystem::create_directories(dir);
  auto write = [&](const Dataset& ds, std::size_t begin, std::size_t end, const std::filesystem::path& file) {
    const std::size_t per = ds.images.numel() / std::max<std::size_t>(ds.size(), 1);
    auto px = ds.images.data<float>();
    std::vector<std::uint8_t> bytes;
    bytes.reserve((end - begin) * (per + lay.label_bytes));
    for (std::size_t n = begin; n < end; ++n) {
      if (lay.label_bytes == 2) bytes.push_back(0);  // coarse label, not modelled
      bytes.push_back(static_cast<std::uint8_t>(ds.labels[n]));
      for (std::size_t i = 0; i < per; ++i) {
        const float v = std::clamp(px[n * per + i], 0.0f, 1.0f);
        bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
      }
    }
    binio::write_file(file, bytes);
  };
  const std::size_t files = lay.train_files.size();
  for (std::size_t f = 0; f < files; ++f) {
    write(train, train.size() * f / files, train.size() * (f + 1) / files, dir / lay.train_files[f]);
  }
  write(test, 0, test.size(), dir / lay.test_file);
}

// ---- synthetic -------------------------------------------------------------

namespace {

Dataset synthetic_split(const SyntheticSpec& s, std::size_t per_class, std::uint64_t seed, Split split) {
  const std::size_t C = 3, S = s.image_size, K = s.num_classes, N = per_class * K;
  Rng rng(seed);
  std::vector<std::uint8_t> px(N * C * S * S);
  std::vector<std::size_t> labels(N);
  const double pi = std::numbers::pi;
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t k = n % K;  // classes interleaved
    labels[n] = k;
    const double theta = pi * static_cast<double>(k) / static_cast<double>(K) + rng.uniform(-0.3, 0.3) * pi / K;
    const double cycles = (k % 2 == 0 ? 2.0 : 3.5) * rng.uniform(0.9, 1.1);
    const double freq = 2.0 * pi * cycles / static_cast<double>(S);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double contrast = rng.uniform(0.5, 1.0);
    double fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
      fg[c] = rng.uniform(0.4, 1.0);
      bg[c] = rng.uniform(0.0, 0.6);
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0; j < S; ++j) {
        const double u = ct * static_cast<double>(j) + st * static_cast<double>(i);
        const double g = 0.5 + 0.5 * contrast * std::tanh(2.0 * std::sin(freq * u + phase));
        for (std::size_t c = 0; c < C; ++c) {
          double v = bg[c] + (fg[c] - bg[c]) * g + rng.normal(0.0, s.noise);
          v = std::clamp(v, 0.0, 1.0);
          px[((n * C + c) * S + i) * S + j] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
  }
  return dataset_from_bytes(px, std::move(labels), C, S, K, split);
}

}  // namespace

std::pair<Dataset, Dataset> synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.samples_per_class == 0 || spec.test_samples_per_class == 0 ||
      spec.image_size == 0) {
    throw ConfigError("synthetic_dataset: class count, samples per class and image size must be positive");
  }
  Dataset train = synthetic_split(spec, spec.samples_per_class, derive_seed(spec.seed, 0), Split::train);
  Dataset test = synthetic_split(spec, spec.test_samples_per_class, derive_seed(spec.seed, 1), Split::test);
  attach_statistics(train, test);
  return {std::move(train), std::move(test)};
}

// ---- batches ---------------------------------------------------------------

void AugmentConfig::validate() const {
  if (mixup_alpha < 0 || cutmix_alpha < 0) throw ConfigError("augment: alphas must be >= 0");
  for (double p : {mixup_prob, random_erase}) {
    if (p < 0 || p > 1) throw ConfigError("augment: probabilities must lie in [0,1]");
  }
  if (color_jitter < 0) throw ConfigError("augment: color jitter strength must be >= 0");
}

Tensor Batch::target_distribution() const {
  if (targets.defined()) return targets;
  Tensor t = Tensor::zeros({size(), num_classes}, DType::f64);
  for (std::size_t b = 0; b < size(); ++b) t.set(b * num_classes + labels[b], 1.0);
  return t;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> positions) {
  Batch b;
  b.images = ds.gather(positions);
  b.positions.assign(positions.begin(), positions.end());
  for (std::size_t p : positions) {
    b.labels.push_back(ds.labels[p]);
    b.sample_ids.push_back(ds.sample_ids[p]);
  }
  b.num_classes = ds.num_classes;
  return b;
}

namespace {

void check_partners(const Batch& b, const std::vector<std::size_t>& partners) {
  if (partners.size() != b.size()) throw DimensionError("mix: partner list length differs from batch size");
  for (std::size_t p : partners) {
    if (p >= b.size()) throw RangeError("mix: partner index out of range");
  }
  if (b.mixed()) throw ContractError("mix: batch is already mixed");
}

std::vector<std::size_t> random_partners(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm.begin(), perm.end());
  return perm;
}

void mix_targets(Batch& b, double lambda, const std::vector<std::size_t>& partners) {
  const std::size_t C = b.num_classes;
  Tensor t = Tensor::zeros({b.size(), C}, DType::f64);
  auto d = t.mutable_data<double>();
  for (std::size_t i = 0; i < b.size(); ++i) {
    d[i * C + b.labels[i]] += lambda;
    d[i * C + b.labels[partners[i]]] += 1.0 - lambda;
  }
  b.targets = t;
  b.mix_partners = partners;
  b.mix_lambda = lambda;
}

}  // namespace

Batch mixup_with(Batch b, double lambda, const std::vector<std::size_t>& partners) {
  check_partners(b, partners);
  if (lambda < 0.0 || lambda > 1.0) throw RangeError("mixup: lambda must lie in [0,1]");
  const std::size_t per = b.images.numel() / b.size();
  Tensor out = Tensor::zeros(b.images.shape());
  auto x = b.images.data<float>();
  auto y = out.mutable_data<float>();
  const auto l = static_cast<float>(lambda);
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t k = 0; k < per; ++k) y[i * per + k] = l * x[i * per + k] + (1.0f - l) * x[partners[i] * per + k];
  }
  b.images = out;
  mix_targets(b, lambda, partners);
  return b;
}

Batch mixup(Batch b, double alpha, Rng& rng) {
  if (alpha <= 0.0) throw ConfigError("mixup: alpha must be positive");
  const double lambda = rng.beta(alpha, alpha);
  const auto partners = random_partners(b.size(), rng);
  return mixup_with(std::move(b), lambda, partners);
}

Batch cutmix_with(Batch b, const Box& box, const std::vector<std::size_t>& partners) {
  check_partners(b, partners);
  const std::size_t C = b.images.size(1), H = b.images.size(2), W = b.images.size(3);
  if (box.y0 > box.y1 || box.x0 > box.x1 || box.y1 > H || box.x1 > W) throw RangeError("cutmix: box outside image");
  Tensor out = b.images.clone();
  auto x = b.images.data<float>();
  auto y = out.mutable_data<float>();
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t r = box.y0; r < box.y1; ++r) {
        for (std::size_t q = box.x0; q < box.x1; ++q) {
          y[((i * C + c) * H + r) * W + q] = x[((partners[i] * C + c) * H + r) * W + q];
        }
      }
    }
  }
  b.images = out;
  mix_targets(b, 1.0 - static_cast<double>(box.area()) / static_cast<double>(H * W), partners);
  return b;
}

Batch cutmix(Batch b, double alpha, Rng& rng) {
  if (alpha <= 0.0) throw ConfigError("cutmix: alpha must be positive");
  const std::size_t H = b.images.size(2), W = b.images.size(3);
  const double lambda = rng.beta(alpha, alpha);
  const double cut = std::sqrt(1.0 - lambda);
  const auto ch = static_cast<long>(static_cast<double>(H) * cut);
  const auto cw = static_cast<long>(static_cast<double>(W) * cut);
  const auto cy = static_cast<long>(rng.uniform_index(H));
  const auto cx = static_cast<long>(rng.uniform_index(W));
  auto clip = [](long v, std::size_t hi) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(hi))); };
  Box box{clip(cy - ch / 2, H), clip(cx - cw / 2, W), clip(cy + ch / 2, H), clip(cx + cw / 2, W)};
  const auto partners = random_partners(b.size(), rng);
  return cutmix_with(std::move(b), box, partners);
}

Batch color_jitter(Batch b, double strength, Rng& rng) {
  if (strength < 0.0) throw ConfigError("color_jitter: strength must be >= 0");
  if (strength == 0.0) return b;
  const std::size_t C = b.images.size(1), HW = b.images.size(2) * b.images.size(3);
  Tensor out = b.images.clone();
  auto x = out.mutable_data<float>();
  auto clamp01 = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  auto gray = [&](std::size_t base, std::size_t p) {
    if (C != 3) return static_cast<double>(x[base + p]);
    return 0.299 * x[base + p] + 0.587 * x[base + HW + p] + 0.114 * x[base + 2 * HW + p];
  };
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::size_t base = i * C * HW;
    const double fb = rng.uniform(1.0 - strength, 1.0 + strength);
    const double fc = rng.uniform(1.0 - strength, 1.0 + strength);
    const double fs = rng.uniform(1.0 - strength, 1.0 + strength);
    for (std::size_t k = 0; k < C * HW; ++k) x[base + k] = clamp01(x[base + k] * fb);
    double m = 0.0;
    for (std::size_t p = 0; p < HW; ++p) m += gray(base, p);
    m /= static_cast<double>(HW);
    for (std::size_t k = 0; k < C * HW; ++k) x[base + k] = clamp01((x[base + k] - m) * fc + m);
    if (C == 3) {
      for (std::size_t p = 0; p < HW; ++p) {
        const double g = gray(base, p);
        for (std::size_t c = 0; c < C; ++c) x[base + c * HW + p] = clamp01((x[base + c * HW + p] - g) * fs + g);
      }
    }
  }
  b.images = out;
  return b;
}

Batch random_erase(Batch b, double prob, std::span<const double> fill, Rng& rng) {
  if (prob < 0.0 || prob > 1.0) throw ConfigError("random_erase: probability must lie in [0,1]");
  const std::size_t C = b.images.size(1), H = b.images.size(2), W = b.images.size(3);
  if (fill.size() != C) throw DimensionError("random_erase: fill needs one value per channel");
  if (prob == 0.0) return b;
  Tensor out = b.images.clone();
  auto x = out.mutable_data<float>();
  const double total = static_cast<double>(H * W);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!rng.bernoulli(prob)) continue;
    std::size_t h = 0, w = 0;
    for (int attempt = 0; attempt < 20 && h == 0; ++attempt) {
      const double area = rng.uniform(0.02, 0.33) * total;
      const double ratio = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
      const auto hh = static_cast<std::size_t>(std::lround(std::sqrt(area * ratio)));
      const auto ww = static_cast<std::size_t>(std::lround(std::sqrt(area / ratio)));
      const double frac = static_cast<double>(hh * ww) / total;
      if (hh >= 1 && ww >= 1 && hh <= H && ww <= W && frac >= 0.02 && frac <= 0.33) {
        h = hh;
        w = ww;
      }
    }
    if (h == 0) {
      // Square fallback closest to 10% of the image that stays inside the band.
      h = w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(0.1 * total))));
      while (h > 1 && static_cast<double>(h * w) / total > 0.33) --h;
    }
    const std::size_t y0 = rng.uniform_index(H - h + 1), x0 = rng.uniform_index(W - w + 1);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t r = y0; r < y0 + h; ++r) {
        for (std::size_t q = x0; q < x0 + w; ++q) x[((i * C + c) * H + r) * W + q] = static_cast<float>(fill[c]);
      }
    }
  }
  b.images = out;
  return b;
}

// ---- BatchStream -----------------------------------------------------------

BatchStream::BatchStream(const Dataset& ds, const BatchOptions& opt, std::size_t epoch)
    : ds_(&ds), opt_(opt), epoch_(epoch), order_(ds.size()) {
  if (opt.batch_size == 0) throw ConfigError("batches: batch_size must be at least 1");
  opt_.augment.validate();
  if (ds.split == Split::test) opt_.augment.enabled = false;
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (opt_.shuffle) {
    Rng rng(derive_seed(derive_seed(opt.seed, epoch), 0));
    rng.shuffle(order_.begin(), order_.end());
  }
}

std::size_t BatchStream::num_batches() const { return (order_.size() + opt_.batch_size - 1) / opt_.batch_size; }

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t n = std::min(opt_.batch_size, order_.size() - cursor_);
  Batch b = make_batch(*ds_, std::span<const std::size_t>(order_).subspan(cursor_, n));
  cursor_ += n;
  Rng rng(derive_seed(derive_seed(opt_.seed, epoch_), 1 + index_++));
  const AugmentConfig& a = opt_.augment;
  if (a.enabled) {
    const bool can_mix = a.mixup_alpha > 0.0 || a.cutmix_alpha > 0.0;
    if (can_mix && b.size() > 1 && rng.bernoulli(a.mixup_prob)) {
      bool use_mixup = a.mixup_alpha > 0.0;
      if (a.mixup_alpha > 0.0 && a.cutmix_alpha > 0.0) use_mixup = rng.bernoulli(0.5);
      b = use_mixup ? mixup(std::move(b), a.mixup_alpha, rng) : cutmix(std::move(b), a.cutmix_alpha, rng);
    }
    if (a.color_jitter > 0.0) b = color_jitter(std::move(b), a.color_jitter, rng);
    if (a.random_erase > 0.0) b = random_erase(std::move(b), a.random_erase, ds_->channel_mean, rng);
  }
  return b;
}

}  // namespace libkd
