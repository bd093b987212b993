// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "libkd/data.hpp"
#include "libkd/models.hpp"

namespace libkd {

// ---- optimizers -------------------------------------------------------------

enum class OptimizerKind : std::uint8_t { sgd_momentum, adamw };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double warmup_epochs = 0.0;
  double min_lr = 0.0;

  void validate() const;
};

/// Linear warmup to cfg.lr over warmup_epochs, then cosine decay to min_lr at
/// total_epochs. `progress` is measured in (fractional) epochs.
double scheduled_lr(const OptimizerConfig& cfg, double progress, double total_epochs);

/// Momentum SGD (coupled L2 decay) or AdamW (decoupled decay). Decay applies
/// to ParamKind::weight tensors only.
class Optimizer {
 public:
  Optimizer(const ParamStore& params, const OptimizerConfig& cfg);

  void step(double lr);
  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Param> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---- reports ------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the evaluation before any update
  double train_loss = 0.0, train_acc = 0.0, test_top1 = 0.0, test_top5 = 0.0, seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  /// Loss of every optimizer step, in order.
  std::vector<double> step_losses;

  const EpochRecord& final() const;
  /// Header epoch,train_loss,train_acc,test_top1,test_top5,seconds. Values
  /// use round-trip precision; with_time = false writes 0 for seconds.
  std::string to_csv(bool with_time = true) const;
  void write_csv(const std::filesystem::path& path, bool with_time = true) const;
};

// ---- evaluation ---------------------------------------------------------------

struct Accuracy {
  double top1 = 0.0, top5 = 0.0;
};

/// Top-1 and top-min(5, C) accuracy of score rows [N x C]; ties rank the
/// lower class index first.
Accuracy topk_accuracy(const Tensor& scores, std::span<const std::size_t> labels);

/// Row argmax with ties to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

/// Eval-mode logits of a model over a dataset (normalized with the dataset's
/// statistics), in dataset order.
Tensor predict_logits(const Model& m, const Dataset& ds, std::size_t batch_size = 256);

/// Student prediction: argmax of 0.5 softmax(z_cls) + 0.5 softmax(z_dist).
std::vector<std::size_t> predict(const Model& student, const Tensor& x);
std::vector<std::size_t> predict_from_heads(const Tensor& z_cls, const Tensor& z_dist);

Accuracy evaluate(const Model& m, const Dataset& ds);

// ---- ensembles ----------------------------------------------------------------

enum class EnsembleRule : std::uint8_t { soft_average, majority_vote };

struct EnsembleOutput {
  Tensor probs;  // [B x C] float64
  std::vector<std::size_t> labels;
};

/// probs = sum_i w_i softmax(z_i) / sum_i w_i; labels = row argmax.
/// Empty weights mean uniform.
EnsembleOutput ensemble_soft_average(std::span<const Tensor> logits, std::span<const double> weights = {});
/// Modal member argmax; ties go to the tied class with the larger soft-average
/// probability, then the lowest index.
std::vector<std::size_t> ensemble_majority_vote(std::span<const Tensor> logits, std::span<const double> weights = {});
/// sum_i w_i z_i / sum_i w_i.
Tensor ensemble_logit_average(std::span<const Tensor> logits, std::span<const double> weights = {});

Accuracy evaluate_ensemble(std::span<const Model* const> members, const Dataset& ds, EnsembleRule rule,
                           std::span<const double> weights = {});

// ---- distillation loss ---------------------------------------------------------

enum class DistillMode : std::uint8_t { hard, soft, none };

const char* mode_name(DistillMode m);
DistillMode parse_mode(const std::string& s);
EnsembleRule parse_rule(const std::string& s);

struct DistillConfig {
  DistillMode mode = DistillMode::hard;
  double alpha = 0.5;
  double temperature = 1.0;
  std::vector<std::string> teacher_ids;
  std::vector<double> teacher_weights;  // empty: uniform
  EnsembleRule rule = EnsembleRule::soft_average;

  /// num_teachers = 0 skips the teacher-list checks.
  void validate(std::size_t num_teachers = 0) const;
};

/// What the distillation head is trained against for one batch.
struct TeacherTargets {
  std::vector<std::size_t> hard_labels;  // hard mode
  Tensor soft_probs;                     // soft mode: softmax(z_t / tau), [B x C] float64
};

/// Builds targets from clean (un-augmented) raw teacher logits. For a mixed
/// batch the targets follow the mix: soft probabilities are mixed with the
/// batch's lambda and partners; hard labels are the argmax of the mixed
/// ensemble distribution.
TeacherTargets teacher_targets(std::span<const Tensor> clean_logits, const DistillConfig& cfg,
                               const Batch* mixing = nullptr);

/// hard: a CE(z_cls, Y) + (1 - a) CE(z_dist, teacher labels)
/// soft: a CE(z_cls, Y) + (1 - a) tau^2 KL(p_t || softmax(z_dist / tau))
/// none: CE(z_cls, Y)
/// Y is a target distribution [B x C]; label_smoothing applies to the Y term only.
Tensor kd_loss(const Tensor& z_cls, const Tensor& z_dist, const TeacherTargets& teacher, const Tensor& y,
               const DistillConfig& cfg, double label_smoothing = 0.0);

// ---- training -------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  double label_smoothing = 0.1;
  AugmentConfig augment;
  /// Per-epoch progress line callback (may be empty).
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Cross-entropy training of a teacher. Deterministic given cfg.seed.
TrainReport train_teacher(Model& teacher, const Dataset& train, const Dataset* test, const TrainConfig& cfg);

/// Supplies clean raw logits [B x C] per teacher for a batch.
class TeacherSource {
 public:
  virtual ~TeacherSource() = default;
  virtual std::size_t num_teachers() const = 0;
  virtual std::vector<Tensor> logits(const Batch& batch) = 0;
};

/// Runs eval-mode teachers on the clean dataset images of a batch.
class LiveTeachers final : public TeacherSource {
 public:
  LiveTeachers(std::vector<const Model*> teachers, const Dataset& ds);
  std::size_t num_teachers() const override { return teachers_.size(); }
  std::vector<Tensor> logits(const Batch& batch) override;
  /// Number of teacher forward passes run so far.
  std::size_t forward_calls() const { return calls_; }

 private:
  std::vector<const Model*> teachers_;
  const Dataset* ds_;
  std::size_t calls_ = 0;
};

/// AdamW training of the student on kd_loss. When the distillation term has
/// zero weight (mode none or alpha = 1) the distillation head is zeroed first
/// and therefore stays zero, so inference reduces to the class head.
TrainReport distill_student(Model& student, const Dataset& train, const Dataset* test, TeacherSource* teachers,
                            const DistillConfig& dcfg, const TrainConfig& cfg);

}  // namespace libkd
