// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "libkd/rng.hpp"
#include "libkd/tensor.hpp"

namespace libkd {

enum class Split : std::uint8_t { train, test };

/// Images are stored as pixels in [0,1]; channel_mean/channel_std are the
/// training-split statistics that normalize_images() applies at model input.
struct Dataset {
  Tensor images;  // [N x C x H x W] float32
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> sample_ids;
  Split split = Split::train;
  std::size_t num_classes = 0;
  std::vector<double> channel_mean, channel_std;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.size(1); }
  std::size_t image_size() const { return images.size(2); }

  /// Images at the given positions, stacked in order.
  Tensor gather(std::span<const std::size_t> positions) const;
  /// Throws ContractError if labels, ids or shapes are inconsistent.
  void validate() const;
};

/// (x - mean_c) / std_c per channel, as float32.
Tensor normalize_images(const Tensor& images, std::span<const double> mean, std::span<const double> std);
Tensor normalize_images(const Tensor& images, const Dataset& stats);

/// Per-channel mean and standard deviation of [N x C x H x W] images.
std::pair<std::vector<double>, std::vector<double>> channel_statistics(const Tensor& images);

/// SHA-256 over shape, class count, sample ids, labels and pixel bytes.
std::array<std::uint8_t, 32> dataset_digest(const Dataset& ds);

// ---- CIFAR binary layout ---------------------------------------------------

enum class CifarVariant : std::uint8_t { cifar10, cifar100 };

/// Reads data_batch_{1..5}.bin + test_batch.bin (CIFAR-10) or train.bin +
/// test.bin (CIFAR-100, fine labels). Each record is the label byte(s)
/// followed by channel-planar pixels of a square image_size image.
std::pair<Dataset, Dataset> load_cifar_binary(const std::filesystem::path& dir, CifarVariant variant,
                                              std::size_t image_size = 32);
/// Writes both splits in the layout load_cifar_binary reads. Pixels are
/// rounded to bytes, so datasets whose pixels are multiples of 1/255
/// round-trip exactly.
void save_cifar_binary(const Dataset& train, const Dataset& test, const std::filesystem::path& dir,
                       CifarVariant variant);

// ---- synthetic data --------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 200;
  std::size_t test_samples_per_class = 100;
  std::size_t image_size = 16;
  std::uint64_t seed = 0;
  /// Standard deviation of the per-pixel Gaussian noise, in [0,1] pixel units.
  double noise = 0.12;
};

/// Class-conditional textures: each class is an oriented two-tone grating
/// with its own orientation and spatial frequency, drawn with random phase,
/// contrast and color tint plus pixel noise. Pixels are quantized to k/255.
std::pair<Dataset, Dataset> synthetic_dataset(const SyntheticSpec& spec);

// ---- batches and augmentation ----------------------------------------------

struct AugmentConfig {
  bool enabled = false;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double mixup_prob = 1.0;
  double color_jitter = 0.3;
  double random_erase = 0.25;

  void validate() const;
};

struct Batch {
  Tensor images;  // [B x C x H x W], pixels in [0,1]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> positions;  // rows of the source dataset
  std::vector<std::uint64_t> sample_ids;
  /// Soft targets [B x num_classes] (float64) once mixed; undefined otherwise.
  Tensor targets;
  /// When mixed: row b was combined with row mix_partners[b] with weight mix_lambda on itself.
  std::vector<std::size_t> mix_partners;
  double mix_lambda = 1.0;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  bool mixed() const { return !mix_partners.empty(); }
  /// targets if mixed, otherwise one-hot labels.
  Tensor target_distribution() const;
};

Batch make_batch(const Dataset& ds, std::span<const std::size_t> positions);

/// Convex pixel mix with a fixed lambda and partner permutation.
Batch mixup_with(Batch b, double lambda, const std::vector<std::size_t>& partners);
/// lambda ~ Beta(alpha, alpha) and a seeded permutation.
Batch mixup(Batch b, double alpha, Rng& rng);

struct Box {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open
  std::size_t area() const { return (y1 - y0) * (x1 - x0); }
};
/// Pastes `box` from the partner image; targets use the exact pasted fraction.
Batch cutmix_with(Batch b, const Box& box, const std::vector<std::size_t>& partners);
/// Standard recipe: lambda ~ Beta(alpha, alpha), a box of side sqrt(1 - lambda)
/// centered uniformly at random and clipped to the image.
Batch cutmix(Batch b, double alpha, Rng& rng);

/// Brightness, contrast and saturation, each scaled by a factor uniform in
/// [1 - s, 1 + s] and clamped to [0,1].
Batch color_jitter(Batch b, double strength, Rng& rng);
/// With probability prob per image, one rectangle covering 2%-33% of the
/// image is set to the per-channel fill value.
Batch random_erase(Batch b, double prob, std::span<const double> fill, Rng& rng);

struct BatchOptions {
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  bool shuffle = true;
  AugmentConfig augment;
};

/// Deterministic per-epoch batch sequence. The shuffle and every
/// augmentation draw derive from (seed, epoch, batch index), so a batch does
/// not depend on how many batches were consumed before it. Test splits are
/// never augmented.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, const BatchOptions& opt, std::size_t epoch);

  std::size_t num_batches() const;
  std::optional<Batch> next();

 private:
  const Dataset* ds_;
  BatchOptions opt_;
  std::size_t epoch_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0, index_ = 0;
};

}  // namespace libkd
