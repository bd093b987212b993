// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "libkd/data.hpp"
#include "libkd/distillation.hpp"
#include "libkd/models.hpp"

namespace libkd {

// LKDL layout, little-endian:
//   "LKDL" | u32 version | u8[32] dataset id | u32 num_samples | u32 num_classes
//   | u16 num_teachers | per teacher: u16 id length, id bytes, u32 checkpoint CRC
//   | u64 sample ids (ascending) | f32 logits [sample][teacher][class] | u32 CRC32
// The id table sits in the header so every record has the same size.

inline constexpr std::uint32_t kCacheVersion = 1;

struct CacheTeacherInfo {
  std::string id;
  std::uint32_t checkpoint_crc = 0;
};

struct NamedTeacher {
  const Model* model = nullptr;
  std::string id;
};

/// Eval-mode logits of every teacher on every clean sample, serialized.
/// Shards run on up to `shard_workers` threads (0: worker_count()) into
/// private slices, so the bytes do not depend on the worker count.
std::vector<std::uint8_t> serialize_logit_cache(std::span<const NamedTeacher> teachers, const Dataset& ds,
                                                std::size_t shard_workers = 0);
/// serialize_logit_cache, written atomically: a failed write leaves no file.
void precompute_logits(std::span<const NamedTeacher> teachers, const Dataset& ds, const std::filesystem::path& path,
                       std::size_t shard_workers = 0);

/// Immutable in-memory cache; safe for concurrent readers.
class LogitCache {
 public:
  /// Throws FormatError (magic), VersionError, CorruptionError (CRC or layout).
  static LogitCache open(const std::filesystem::path& path);
  static LogitCache parse(std::vector<std::uint8_t> bytes);

  const std::array<std::uint8_t, 32>& dataset_id() const { return dataset_id_; }
  std::size_t num_samples() const { return ids_.size(); }
  std::size_t num_classes() const { return classes_; }
  std::size_t num_teachers() const { return teachers_.size(); }
  const std::vector<CacheTeacherInfo>& teachers() const { return teachers_; }
  const std::vector<std::uint64_t>& sample_ids() const { return ids_; }
  /// Index of a teacher id; throws CacheMissError if absent.
  std::size_t teacher_index(const std::string& id) const;

  std::size_t header_size() const { return header_size_; }
  /// header_size + (i * num_teachers + t) * 4 * num_classes
  std::size_t record_offset(std::size_t sample_index, std::size_t teacher) const;

  /// Raw logits; throws CacheMissError naming an unknown sample id.
  std::span<const float> lookup(std::uint64_t sample_id, std::size_t teacher) const;
  std::span<const float> lookup(std::uint64_t sample_id, const std::string& teacher_id) const;

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::array<std::uint8_t, 32> dataset_id_{};
  std::size_t classes_ = 0, header_size_ = 0;
  std::vector<CacheTeacherInfo> teachers_;
  std::vector<std::uint64_t> ids_;
  std::vector<float> logits_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

struct CacheVerifyReport {
  std::size_t records_checked = 0;
  double max_abs_deviation = 0.0;
  std::vector<std::uint64_t> stale_ids;          // samples with any deviation
  std::vector<std::string> checkpoint_mismatch;  // teachers whose CRC differs from the header
  bool stale() const { return max_abs_deviation > 0.0 || !checkpoint_mismatch.empty(); }
};

/// Recomputes a seeded random `fraction` of samples with the given teachers
/// (matched to the cache by id) and compares bit for bit.
CacheVerifyReport verify_cache(const LogitCache& cache, std::span<const NamedTeacher> teachers, const Dataset& ds,
                               double fraction, std::uint64_t seed = 0);

/// Teacher logits served from a cache, looked up by the batch's sample ids.
/// Throws CacheMissError naming dataset ids absent from the cache, and
/// ConfigError when the ids are present but the dataset digest differs.
class CachedTeachers final : public TeacherSource {
 public:
  /// teacher_ids selects and orders cache teachers; empty means all.
  CachedTeachers(const LogitCache& cache, const Dataset& ds, std::vector<std::string> teacher_ids = {});
  std::size_t num_teachers() const override { return selected_.size(); }
  std::vector<Tensor> logits(const Batch& batch) override;

 private:
  const LogitCache* cache_;
  std::vector<std::size_t> selected_;
};

}  // namespace libkd
