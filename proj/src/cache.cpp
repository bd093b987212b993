// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "binio.hpp"
#include "libkd/parallel.hpp"

namespace libkd {

namespace {

constexpr char kMagic[4] = {'L', 'K', 'D', 'L'};
constexpr std::size_t kShard = 256;

void check_teachers(std::span<const NamedTeacher> teachers, const Dataset& ds) {
  if (teachers.empty()) throw ConfigError("logit cache: at least one teacher required");
  if (teachers.size() > 0xffff) throw ConfigError("logit cache: too many teachers");
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    const Model* m = teachers[i].model;
    if (!m) throw ContractError("logit cache: null teacher");
    if (teachers[i].id.empty() || teachers[i].id.size() > 0xffff) {
      throw ConfigError("logit cache: teacher ids must be 1-65535 bytes");
    }
    if (m->spec().num_classes != ds.num_classes) {
      throw ConfigError("logit cache: teacher '" + teachers[i].id + "' has " +
                        std::to_string(m->spec().num_classes) + " classes, dataset has " +
                        std::to_string(ds.num_classes));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (teachers[j].id == teachers[i].id) throw ConfigError("logit cache: duplicate teacher id '" + teachers[i].id + "'");
    }
  }
}

// Dataset positions in ascending sample-id order.
std::vector<std::size_t> id_order(const Dataset& ds) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ds.sample_ids[a] < ds.sample_ids[b]; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (ds.sample_ids[order[i]] == ds.sample_ids[order[i - 1]]) {
      throw ContractError("logit cache: duplicate sample id " + std::to_string(ds.sample_ids[order[i]]));
    }
  }
  return order;
}

// Eval-mode logits of one teacher on the given dataset rows, as float32.
void teacher_rows(const Model& m, const Dataset& ds, std::span<const std::size_t> positions, std::vector<float>& out) {
  Tensor x = normalize_images(ds.gather(positions), ds);
  if (m.dtype() != DType::f32) x = x.to(m.dtype());
  const Tensor z = m.forward(x);
  out.resize(z.numel());
  for (std::size_t i = 0; i < z.numel(); ++i) out[i] = static_cast<float>(z.at(i));
}

std::size_t with_workers(std::size_t shard_workers) {
  return shard_workers == 0 ? worker_count() : shard_workers;
}

// parallel_for with an explicit worker cap.
void sharded(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  // Group shards into `workers` contiguous blocks and let parallel_for spread them.
  const std::size_t blocks = std::min(workers, n);
  parallel_for(blocks, [&](std::size_t w) {
    for (std::size_t i = n * w / blocks; i < n * (w + 1) / blocks; ++i) fn(i);
  });
}

}  // namespace

std::vector<std::uint8_t> serialize_logit_cache(std::span<const NamedTeacher> teachers, const Dataset& ds,
                                                std::size_t shard_workers) {
  check_teachers(teachers, ds);
  if (ds.size() == 0) throw ContractError("logit cache: empty dataset");
  if (ds.size() > 0xffffffffu) throw ConfigError("logit cache: too many samples");
  const std::vector<std::size_t> order = id_order(ds);
  const std::size_t N = ds.size(), T = teachers.size(), C = ds.num_classes;

  std::vector<float> logits(N * T * C);
  const std::size_t shards = (N + kShard - 1) / kShard;
  sharded(shards, with_workers(shard_workers), [&](std::size_t s) {
    const std::size_t begin = s * kShard, end = std::min(N, begin + kShard);
    const std::span<const std::size_t> pos(order.data() + begin, end - begin);
    std::vector<float> rows;
    for (std::size_t t = 0; t < T; ++t) {
      teacher_rows(*teachers[t].model, ds, pos, rows);
      for (std::size_t i = 0; i < pos.size(); ++i) {
        std::memcpy(&logits[((begin + i) * T + t) * C], &rows[i * C], C * sizeof(float));
      }
    }
  });

  binio::Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCacheVersion);
  const auto digest = dataset_digest(ds);
  w.put_bytes(digest.data(), digest.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(N));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(C));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(T));
  for (const NamedTeacher& t : teachers) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.id.size()));
    w.put_string(t.id);
    w.put<std::uint32_t>(checkpoint_crc(*t.model));
  }
  for (std::size_t p : order) w.put<std::uint64_t>(ds.sample_ids[p]);
  w.put_bytes(logits.data(), logits.size() * sizeof(float));
  w.put_crc();
  return std::move(w.bytes());
}

void precompute_logits(std::span<const NamedTeacher> teachers, const Dataset& ds, const std::filesystem::path& path,
                       std::size_t shard_workers) {
  binio::write_file(path, serialize_logit_cache(teachers, ds, shard_workers));
}

// ---- LogitCache ----------------------------------------------------------------

LogitCache LogitCache::open(const std::filesystem::path& path) { return parse(binio::read_file(path)); }

LogitCache LogitCache::parse(std::vector<std::uint8_t> bytes) {
  const std::string what = "logit cache";
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(what + ": bad magic (not an LKDL file)");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCacheVersion) {
    throw VersionError(what + ": version " + std::to_string(version) + ", expected " + std::to_string(kCacheVersion));
  }
  binio::verify_footer_crc(bytes, what);

  LogitCache c;
  binio::Reader r(bytes.data(), bytes.size() - 4, what);
  r.take(8);
  std::memcpy(c.dataset_id_.data(), r.take(32), 32);
  const std::size_t N = r.get<std::uint32_t>();
  c.classes_ = r.get<std::uint32_t>();
  const std::size_t T = r.get<std::uint16_t>();
  if (c.classes_ == 0 || T == 0) throw CorruptionError(what + ": zero classes or teachers");
  for (std::size_t t = 0; t < T; ++t) {
    CacheTeacherInfo info;
    info.id = r.get_string(r.get<std::uint16_t>());
    info.checkpoint_crc = r.get<std::uint32_t>();
    c.teachers_.push_back(std::move(info));
  }
  c.ids_.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    c.ids_[i] = r.get<std::uint64_t>();
    if (i > 0 && c.ids_[i] <= c.ids_[i - 1]) throw CorruptionError(what + ": sample ids not strictly ascending");
  }
  c.header_size_ = r.position();
  const std::size_t payload = N * T * c.classes_ * sizeof(float);
  if (r.remaining() != payload) {
    throw CorruptionError(what + ": " + std::to_string(r.remaining()) + " record bytes, expected " +
                          std::to_string(payload));
  }
  c.logits_.resize(payload / sizeof(float));
  std::memcpy(c.logits_.data(), r.take(payload), payload);
  c.index_.reserve(N);
  for (std::size_t i = 0; i < N; ++i) c.index_.emplace(c.ids_[i], i);
  c.bytes_ = std::move(bytes);
  return c;
}

std::size_t LogitCache::teacher_index(const std::string& id) const {
  for (std::size_t t = 0; t < teachers_.size(); ++t) {
    if (teachers_[t].id == id) return t;
  }
  throw CacheMissError("logit cache: no teacher '" + id + "'");
}

std::size_t LogitCache::record_offset(std::size_t sample_index, std::size_t teacher) const {
  return header_size_ + (sample_index * teachers_.size() + teacher) * sizeof(float) * classes_;
}

std::span<const float> LogitCache::lookup(std::uint64_t sample_id, std::size_t teacher) const {
  if (teacher >= teachers_.size()) throw CacheMissError("logit cache: teacher index out of range");
  const auto it = index_.find(sample_id);
  if (it == index_.end()) throw CacheMissError("logit cache: no record for sample id " + std::to_string(sample_id));
  // Records in the file need not be float-aligned; logits_ is the aligned copy.
  const std::size_t k = (record_offset(it->second, teacher) - header_size_) / sizeof(float);
  return {logits_.data() + k, classes_};
}

std::span<const float> LogitCache::lookup(std::uint64_t sample_id, const std::string& teacher_id) const {
  return lookup(sample_id, teacher_index(teacher_id));
}

// ---- verification ----------------------------------------------------------------

CacheVerifyReport verify_cache(const LogitCache& cache, std::span<const NamedTeacher> teachers, const Dataset& ds,
                               double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("verify_cache: fraction must lie in [0,1]");
  CacheVerifyReport report;
  std::vector<std::size_t> slot(teachers.size());
  for (std::size_t t = 0; t < teachers.size(); ++t) {
    slot[t] = cache.teacher_index(teachers[t].id);
    if (checkpoint_crc(*teachers[t].model) != cache.teachers()[slot[t]].checkpoint_crc) {
      report.checkpoint_mismatch.push_back(teachers[t].id);
    }
  }
  const std::size_t count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  if (count == 0 || teachers.empty()) return report;
  std::vector<std::size_t> pos(ds.size());
  std::iota(pos.begin(), pos.end(), 0);
  Rng rng(seed);
  rng.shuffle(pos.begin(), pos.end());
  pos.resize(count);
  std::sort(pos.begin(), pos.end());

  std::vector<double> worst(count, 0.0);
  const std::size_t C = cache.num_classes();
  std::vector<float> rows;
  for (std::size_t begin = 0; begin < count; begin += kShard) {
    const std::span<const std::size_t> chunk(pos.data() + begin, std::min(kShard, count - begin));
    for (std::size_t t = 0; t < teachers.size(); ++t) {
      teacher_rows(*teachers[t].model, ds, chunk, rows);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        const auto stored = cache.lookup(ds.sample_ids[chunk[i]], slot[t]);
        for (std::size_t c = 0; c < C; ++c) {
          const double d = std::abs(static_cast<double>(stored[c]) - static_cast<double>(rows[i * C + c]));
          worst[begin + i] = std::max(worst[begin + i], std::isnan(d) ? INFINITY : d);
        }
        ++report.records_checked;
      }
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    report.max_abs_deviation = std::max(report.max_abs_deviation, worst[i]);
    if (worst[i] > 0.0) report.stale_ids.push_back(ds.sample_ids[pos[i]]);
  }
  std::sort(report.stale_ids.begin(), report.stale_ids.end());
  return report;
}

// ---- CachedTeachers ----------------------------------------------------------------

CachedTeachers::CachedTeachers(const LogitCache& cache, const Dataset& ds, std::vector<std::string> teacher_ids)
    : cache_(&cache) {
  const auto& ids = cache.sample_ids();
  std::vector<std::uint64_t> missing;
  for (std::uint64_t id : ds.sample_ids) {
    if (!std::binary_search(ids.begin(), ids.end(), id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "logit cache is missing " + std::to_string(missing.size()) + " sample id(s):";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 8); ++i) msg += " " + std::to_string(missing[i]);
    if (missing.size() > 8) msg += " ...";
    throw CacheMissError(msg);
  }
  if (cache.dataset_id() != dataset_digest(ds)) {
    throw ConfigError("logit cache was built for a different dataset (dataset id mismatch)");
  }
  if (cache.num_classes() != ds.num_classes) throw ConfigError("logit cache: class count differs from the dataset");
  if (teacher_ids.empty()) {
    selected_.resize(cache.num_teachers());
    std::iota(selected_.begin(), selected_.end(), 0);
  } else {
    for (const std::string& id : teacher_ids) selected_.push_back(cache.teacher_index(id));
  }
}

std::vector<Tensor> CachedTeachers::logits(const Batch& batch) {
  const std::size_t B = batch.size(), C = cache_->num_classes();
  std::vector<Tensor> out;
  for (std::size_t t : selected_) {
    std::vector<float> z(B * C);
    for (std::size_t b = 0; b < B; ++b) {
      const auto row = cache_->lookup(batch.sample_ids[b], t);
      std::copy(row.begin(), row.end(), z.begin() + static_cast<std::ptrdiff_t>(b * C));
    }
    out.push_back(Tensor::from({B, C}, std::move(z)));
  }
  return out;
}

}  // namespace libkd
