// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "libkd/layers.hpp"

namespace libkd {

enum class Family : std::uint8_t { cnn_teacher, inn_teacher, vit_student };

const char* family_name(Family f);
Family parse_family(const std::string& name);

/// Architecture description. Teacher fields must be set only for teacher
/// families and ViT fields only for the student; validate() enforces it.
struct ModelSpec {
  Family family = Family::cnn_teacher;
  std::size_t num_classes = 10;
  std::size_t image_size = 16;
  std::size_t in_channels = 3;

  // Residual teachers.
  std::vector<std::size_t> stage_depths;
  std::vector<std::size_t> strides;
  std::size_t base_channels = 0, stem_channels = 0, expansion = 0, kernel_size = 0;
  nn::Shortcut shortcut = nn::Shortcut::projection;
  std::size_t group_channels = 0, reduction_ratio = 0;  // involution only

  // ViT student.
  std::size_t patch_size = 0, embed_dim = 0, depth = 0, num_heads = 0;
  double mlp_ratio = 0.0, drop_path_rate = 0.0;

  bool is_teacher() const { return family != Family::vit_student; }
  /// Throws ConfigError naming the first offending field.
  void validate() const;

  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);

  bool operator==(const ModelSpec&) const = default;
};

enum class Preset : std::uint8_t { desk, paper };

Preset parse_preset(const std::string& name);
ModelSpec preset_spec(Family family, Preset preset);

/// Logits of both student heads; dist is undefined for teachers.
struct HeadLogits {
  Tensor cls;
  Tensor dist;
};

struct NamedActivation {
  std::string name;
  Tensor value;  // [B x features]
};

class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed, DType dtype = DType::f32);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  DType dtype() const { return store_->dtype(); }

  HeadLogits forward_heads(const Tensor& x, const ForwardContext& ctx = {}) const;
  /// Teacher logits. For the student, log(0.5 softmax(z_cls) + 0.5 softmax(z_dist))
  /// computed outside the tape, so its softmax and argmax are the two-head
  /// inference rule.
  Tensor forward(const Tensor& x, const ForwardContext& ctx = {}) const;
  /// Eval-mode forward that also returns the output of every named block.
  std::pair<Tensor, std::vector<NamedActivation>> forward_with_activations(const Tensor& x) const;
  std::vector<std::string> block_names() const;

  /// Deep copy of parameters and buffers.
  Model clone() const;
  /// Copy converted to another dtype (buffers included).
  Model to(DType dtype) const;
  /// Overwrites every tensor with the same-named tensor of `other`.
  void load_state(const Model& other);

 private:
  struct Teacher;
  struct Student;
  Tensor teacher_forward(const Tensor& x, const ForwardContext& ctx, std::vector<NamedActivation>* acts) const;
  HeadLogits student_forward(const Tensor& x, const ForwardContext& ctx, std::vector<NamedActivation>* acts) const;
  void check_input(const Tensor& x) const;

  ModelSpec spec_;
  std::unique_ptr<ParamStore> store_;
  std::shared_ptr<const Teacher> teacher_;
  std::shared_ptr<const Student> student_;
};

Model build_cnn_teacher(const ModelSpec& spec, std::uint64_t seed, DType dtype = DType::f32);
Model build_inn_teacher(const ModelSpec& spec, std::uint64_t seed, DType dtype = DType::f32);
Model build_vit_student(const ModelSpec& spec, std::uint64_t seed, DType dtype = DType::f32);

// ---- checkpoints (LKDM) ---------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "LKDM", u32 version, u32 JSON length, JSON spec, then per tensor
/// [u16 name length, name, u8 ndim, u32 dims..., float32 data], then the
/// CRC32 of all preceding bytes. Little-endian. Float64 models are rounded
/// to float32.
std::vector<std::uint8_t> serialize_checkpoint(const Model& m);
Model deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// CRC32 stored in the footer of a serialized checkpoint.
std::uint32_t checkpoint_crc(const Model& m);

}  // namespace libkd
