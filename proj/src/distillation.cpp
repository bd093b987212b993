// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/distillation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "libkd/parallel.hpp"

namespace libkd {

// ---- optimizers -------------------------------------------------------------

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0) || !(min_lr >= 0.0)) throw ConfigError("optimizer: learning rates must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer: momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("optimizer: weight decay must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("optimizer: betas must lie in [0,1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
  if (warmup_epochs < 0.0) throw ConfigError("optimizer: warmup epochs must be >= 0");
}

double scheduled_lr(const OptimizerConfig& cfg, double progress, double total_epochs) {
  if (progress < cfg.warmup_epochs) return cfg.lr * progress / cfg.warmup_epochs;
  const double span = total_epochs - cfg.warmup_epochs;
  if (span <= 0.0) return cfg.lr;
  const double t = std::clamp((progress - cfg.warmup_epochs) / span, 0.0, 1.0);
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

Optimizer::Optimizer(const ParamStore& params, const OptimizerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  for (const Param& p : params.items()) {
    if (p.kind == ParamKind::buffer) continue;
    params_.push_back(p);
    m_.emplace_back(p.value.numel(), 0.0);
    if (cfg_.kind == OptimizerKind::adamw) v_.emplace_back(p.value.numel(), 0.0);
  }
}

void Optimizer::step(double lr) {
  ++t_;
  const bool adam = cfg_.kind == OptimizerKind::adamw;
  const double bc1 = adam ? 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)) : 1.0;
  const double bc2 = adam ? 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)) : 1.0;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor w = params_[k].value;
    const Tensor g = w.grad();
    if (!g.defined()) continue;
    const double wd = params_[k].kind == ParamKind::weight ? cfg_.weight_decay : 0.0;
    std::vector<double>& m = m_[k];
    detail::dispatch(w.dtype(), [&]<class T>(T) {
      auto wv = w.mutable_data<T>();
      auto gv = g.data<T>();
      if (!adam) {
        for (std::size_t i = 0; i < wv.size(); ++i) {
          const double d = static_cast<double>(gv[i]) + wd * static_cast<double>(wv[i]);
          m[i] = cfg_.momentum * m[i] + d;
          wv[i] = static_cast<T>(static_cast<double>(wv[i]) - lr * m[i]);
        }
        return;
      }
      std::vector<double>& v = v_[k];
      for (std::size_t i = 0; i < wv.size(); ++i) {
        const double gi = gv[i];
        double wi = static_cast<double>(wv[i]);
        wi -= lr * wd * wi;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        wi -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        wv[i] = static_cast<T>(wi);
      }
    });
  }
}

// ---- reports ------------------------------------------------------------------

const EpochRecord& TrainReport::final() const {
  if (epochs.empty()) throw ContractError("train report has no epochs");
  return epochs.back();
}

std::string TrainReport::to_csv(bool with_time) const {
  std::ostringstream out;
  out << "epoch,train_loss,train_acc,test_top1,test_top5,seconds\n";
  out << std::setprecision(17);
  for (const EpochRecord& r : epochs) {
    out << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.test_top1 << ',' << r.test_top5 << ','
        << (with_time ? r.seconds : 0.0) << '\n';
  }
  return out.str();
}

void TrainReport::write_csv(const std::filesystem::path& path, bool with_time) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << to_csv(with_time);
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

// ---- evaluation ---------------------------------------------------------------

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  const std::size_t B = scores.size(0), C = scores.size(1);
  std::vector<std::size_t> out(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 1; c < C; ++c) {
      if (scores.at(b * C + c) > scores.at(b * C + out[b])) out[b] = c;
    }
  }
  return out;
}

Accuracy topk_accuracy(const Tensor& scores, std::span<const std::size_t> labels) {
  if (scores.dim() != 2 || scores.size(0) != labels.size()) {
    throw DimensionError("topk_accuracy: scores " + shape_str(scores.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = scores.size(0), C = scores.size(1), k = std::min<std::size_t>(5, C);
  if (B == 0) throw ContractError("topk_accuracy: empty dataset");
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t y = labels[b];
    if (y >= C) throw RangeError("topk_accuracy: label out of range");
    const double sy = scores.at(b * C + y);
    std::size_t rank = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double s = scores.at(b * C + c);
      if (s > sy || (s == sy && c < y)) ++rank;
    }
    hit1 += rank == 0;
    hit5 += rank < k;
  }
  return {static_cast<double>(hit1) / static_cast<double>(B), static_cast<double>(hit5) / static_cast<double>(B)};
}

Tensor predict_logits(const Model& m, const Dataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw ContractError("predict_logits: empty dataset");
  const std::size_t C = m.spec().num_classes;
  const std::size_t chunks = (ds.size() + batch_size - 1) / batch_size;
  Tensor out = Tensor::zeros({ds.size(), C}, DType::f32);
  auto dst = out.mutable_data<float>();
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t begin = k * batch_size, end = std::min(ds.size(), begin + batch_size);
    std::vector<std::size_t> pos(end - begin);
    std::iota(pos.begin(), pos.end(), begin);
    Tensor x = normalize_images(ds.gather(pos), ds);
    if (m.dtype() != DType::f32) x = x.to(m.dtype());
    const Tensor z = m.forward(x);
    for (std::size_t i = 0; i < z.numel(); ++i) dst[begin * C + i] = static_cast<float>(z.at(i));
  });
  return out;
}

std::vector<std::size_t> predict_from_heads(const Tensor& z_cls, const Tensor& z_dist) {
  const Tensor p = add(softmax(z_cls.to(DType::f64).detach(), 1), softmax(z_dist.to(DType::f64).detach(), 1));
  return argmax_rows(scale(p, 0.5));
}

std::vector<std::size_t> predict(const Model& student, const Tensor& x) {
  HeadLogits h = student.forward_heads(x);
  if (!h.dist.defined()) return argmax_rows(h.cls);
  return predict_from_heads(h.cls, h.dist);
}

Accuracy evaluate(const Model& m, const Dataset& ds) { return topk_accuracy(predict_logits(m, ds), ds.labels); }

// ---- ensembles ----------------------------------------------------------------

namespace {

std::vector<double> member_weights(std::span<const Tensor> logits, std::span<const double> weights) {
  if (logits.empty()) throw ContractError("ensemble: at least one member required");
  for (const Tensor& z : logits) {
    if (z.dim() != 2 || z.shape() != logits[0].shape()) {
      throw DimensionError("ensemble: member logits " + shape_str(z.shape()) + " vs " +
                           shape_str(logits[0].shape()));
    }
  }
  if (weights.empty()) return std::vector<double>(logits.size(), 1.0);
  if (weights.size() != logits.size()) throw DimensionError("ensemble: one weight per member required");
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("ensemble: weights must be >= 0");
    s += w;
  }
  if (!(s > 0.0)) throw ConfigError("ensemble: weights must not all be zero");
  return {weights.begin(), weights.end()};
}

std::vector<double> row_softmax(const Tensor& z, std::size_t row, double temperature) {
  const std::size_t C = z.size(1);
  std::vector<double> p(C);
  double mx = -INFINITY;
  for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, z.at(row * C + c) / temperature);
  double s = 0.0;
  for (std::size_t c = 0; c < C; ++c) s += p[c] = std::exp(z.at(row * C + c) / temperature - mx);
  for (double& v : p) v /= s;
  return p;
}

// Argmax of primary; exact ties go to the larger secondary, then the lowest index.
std::size_t argmax_tiebreak(const double* primary, const double* secondary, std::size_t C) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < C; ++c) {
    if (primary[c] > primary[best] || (primary[c] == primary[best] && secondary[c] > secondary[best])) best = c;
  }
  return best;
}

// Weighted vote histogram [B x C] with raw (unnormalized) weights, so uniform
// votes are exact integers and ties are exact.
std::vector<double> vote_counts(std::span<const Tensor> logits, const std::vector<double>& w) {
  const std::size_t B = logits[0].size(0), C = logits[0].size(1);
  std::vector<double> votes(B * C, 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto am = argmax_rows(logits[i]);
    for (std::size_t b = 0; b < B; ++b) votes[b * C + am[b]] += w[i];
  }
  return votes;
}

void mix_rows(std::vector<double>& rows, std::size_t C, const Batch& mix) {
  const std::vector<double> src = rows;
  const double l = mix.mix_lambda;
  for (std::size_t b = 0; b < mix.size(); ++b) {
    const std::size_t q = mix.mix_partners[b];
    for (std::size_t c = 0; c < C; ++c) rows[b * C + c] = l * src[b * C + c] + (1.0 - l) * src[q * C + c];
  }
}

std::vector<double> soft_average_rows(std::span<const Tensor> logits, const std::vector<double>& w,
                                      double temperature) {
  const std::size_t B = logits[0].size(0), C = logits[0].size(1);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<double> probs(B * C, 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    for (std::size_t b = 0; b < B; ++b) {
      const auto p = row_softmax(logits[i], b, temperature);
      for (std::size_t c = 0; c < C; ++c) probs[b * C + c] += w[i] * p[c];
    }
  }
  for (double& v : probs) v /= total;
  return probs;
}

}  // namespace

EnsembleOutput ensemble_soft_average(std::span<const Tensor> logits, std::span<const double> weights) {
  const auto w = member_weights(logits, weights);
  const std::size_t B = logits[0].size(0), C = logits[0].size(1);
  EnsembleOutput out;
  out.probs = Tensor::from({B, C}, soft_average_rows(logits, w, 1.0));
  out.labels = argmax_rows(out.probs);
  return out;
}

std::vector<std::size_t> ensemble_majority_vote(std::span<const Tensor> logits, std::span<const double> weights) {
  const auto w = member_weights(logits, weights);
  const std::size_t B = logits[0].size(0), C = logits[0].size(1);
  const auto votes = vote_counts(logits, w);
  const auto probs = soft_average_rows(logits, w, 1.0);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) out[b] = argmax_tiebreak(&votes[b * C], &probs[b * C], C);
  return out;
}

Tensor ensemble_logit_average(std::span<const Tensor> logits, std::span<const double> weights) {
  const auto w = member_weights(logits, weights);
  const std::size_t B = logits[0].size(0), C = logits[0].size(1);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<double> z(B * C, 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    for (std::size_t k = 0; k < B * C; ++k) z[k] += w[i] * logits[i].at(k);
  }
  for (double& v : z) v /= total;
  return Tensor::from({B, C}, z);
}

Accuracy evaluate_ensemble(std::span<const Model* const> members, const Dataset& ds, EnsembleRule rule,
                           std::span<const double> weights) {
  std::vector<Tensor> logits;
  for (const Model* m : members) logits.push_back(predict_logits(*m, ds));
  if (rule == EnsembleRule::soft_average) return topk_accuracy(ensemble_soft_average(logits, weights).probs, ds.labels);
  // A vote yields a single label; top-5 is reported for the soft-average ranking.
  const auto labels = ensemble_majority_vote(logits, weights);
  std::size_t hit = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) hit += labels[b] == ds.labels[b];
  Accuracy acc = topk_accuracy(ensemble_soft_average(logits, weights).probs, ds.labels);
  acc.top1 = static_cast<double>(hit) / static_cast<double>(labels.size());
  return acc;
}

// ---- distillation loss ---------------------------------------------------------

const char* mode_name(DistillMode m) {
  switch (m) {
    case DistillMode::hard: return "hard";
    case DistillMode::soft: return "soft";
    case DistillMode::none: return "none";
  }
  return "?";
}

DistillMode parse_mode(const std::string& s) {
  if (s == "hard") return DistillMode::hard;
  if (s == "soft") return DistillMode::soft;
  if (s == "none") return DistillMode::none;
  throw ConfigError("unknown distillation mode '" + s + "' (expected hard, soft or none)");
}

EnsembleRule parse_rule(const std::string& s) {
  if (s == "soft_average") return EnsembleRule::soft_average;
  if (s == "majority_vote") return EnsembleRule::majority_vote;
  throw ConfigError("unknown ensemble rule '" + s + "' (expected soft_average or majority_vote)");
}

void DistillConfig::validate(std::size_t num_teachers) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill: alpha must lie in [0,1]");
  if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be positive");
  if (rule == EnsembleRule::majority_vote && mode != DistillMode::hard) {
    throw ConfigError("distill: majority_vote is only valid for hard distillation");
  }
  double s = 0.0;
  for (double w : teacher_weights) {
    if (!(w >= 0.0)) throw ConfigError("distill: teacher weights must be >= 0");
    s += w;
  }
  if (!teacher_weights.empty() && !(s > 0.0)) throw ConfigError("distill: teacher weights must not all be zero");
  if (num_teachers > 0) {
    if (!teacher_weights.empty() && teacher_weights.size() != num_teachers) {
      throw ConfigError("distill: " + std::to_string(teacher_weights.size()) + " weights for " +
                        std::to_string(num_teachers) + " teachers");
    }
    if (!teacher_ids.empty() && teacher_ids.size() != num_teachers) {
      throw ConfigError("distill: " + std::to_string(teacher_ids.size()) + " teacher ids for " +
                        std::to_string(num_teachers) + " teachers");
    }
  }
}

TeacherTargets teacher_targets(std::span<const Tensor> clean_logits, const DistillConfig& cfg, const Batch* mixing) {
  TeacherTargets out;
  if (cfg.mode == DistillMode::none) return out;
  const auto w = member_weights(clean_logits, cfg.teacher_weights);
  const std::size_t B = clean_logits[0].size(0), C = clean_logits[0].size(1);
  const Batch* mix = mixing && mixing->mixed() ? mixing : nullptr;
  if (mix && mix->size() != B) throw DimensionError("teacher_targets: batch and logits differ in size");
  if (cfg.mode == DistillMode::soft) {
    const Tensor zt = ensemble_logit_average(clean_logits, cfg.teacher_weights);
    std::vector<double> p(B * C);
    for (std::size_t b = 0; b < B; ++b) {
      const auto row = row_softmax(zt, b, cfg.temperature);
      std::copy(row.begin(), row.end(), p.begin() + static_cast<std::ptrdiff_t>(b * C));
    }
    if (mix) mix_rows(p, C, *mix);
    out.soft_probs = Tensor::from({B, C}, p);
    return out;
  }
  std::vector<double> probs = soft_average_rows(clean_logits, w, 1.0);
  if (mix) mix_rows(probs, C, *mix);
  out.hard_labels.resize(B);
  if (cfg.rule == EnsembleRule::soft_average) {
    for (std::size_t b = 0; b < B; ++b) out.hard_labels[b] = argmax_tiebreak(&probs[b * C], &probs[b * C], C);
  } else {
    std::vector<double> votes = vote_counts(clean_logits, w);
    if (mix) mix_rows(votes, C, *mix);
    for (std::size_t b = 0; b < B; ++b) out.hard_labels[b] = argmax_tiebreak(&votes[b * C], &probs[b * C], C);
  }
  return out;
}

Tensor kd_loss(const Tensor& z_cls, const Tensor& z_dist, const TeacherTargets& teacher, const Tensor& y,
               const DistillConfig& cfg, double label_smoothing) {
  cfg.validate();
  const Tensor target = y.dtype() == z_cls.dtype() ? y : y.to(z_cls.dtype());
  Tensor base = cross_entropy(z_cls, target, label_smoothing);
  if (cfg.mode == DistillMode::none) return base;
  if (!z_dist.defined()) throw ConfigError("kd_loss: distillation requires the distillation-head logits");
  Tensor term;
  double weight = 1.0 - cfg.alpha;
  if (cfg.mode == DistillMode::hard) {
    if (teacher.hard_labels.size() != z_dist.size(0)) throw DimensionError("kd_loss: teacher labels missing");
    term = cross_entropy(z_dist, teacher.hard_labels, 0.0);
  } else {
    if (!teacher.soft_probs.defined()) throw DimensionError("kd_loss: teacher probabilities missing");
    const Tensor p = teacher.soft_probs.dtype() == z_dist.dtype() ? teacher.soft_probs
                                                                  : teacher.soft_probs.to(z_dist.dtype());
    term = kl_divergence_logits(p, scale(z_dist, 1.0 / cfg.temperature));
    weight *= cfg.temperature * cfg.temperature;
  }
  return add(scale(base, cfg.alpha), scale(term, weight));
}

// ---- training -------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor model_input(const Batch& b, const Dataset& ds, DType dt) {
  Tensor x = normalize_images(b.images, ds);
  return dt == DType::f32 ? x : x.to(dt);
}

std::size_t count_correct(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& labels) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) n += pred[i] == labels[i];
  return n;
}

void fill_test(EpochRecord& r, const Model& m, const Dataset* test) {
  if (!test) return;
  const Accuracy a = evaluate(m, *test);
  r.test_top1 = a.top1;
  r.test_top5 = a.top5;
}

// Epoch-0 row: eval-mode loss and accuracy on the clean training set.
EpochRecord initial_record(const Model& m, const Dataset& train, const Dataset* test, double smoothing) {
  const auto t0 = Clock::now();
  EpochRecord r;
  const Tensor logits = predict_logits(m, train);
  if (m.spec().is_teacher()) {
    r.train_loss = cross_entropy(logits, train.labels, smoothing).item();
  } else {
    // Student rows report the class-head loss.
    double total = 0.0;
    const std::size_t bs = 256;
    for (std::size_t begin = 0; begin < train.size(); begin += bs) {
      std::vector<std::size_t> pos(std::min(bs, train.size() - begin));
      std::iota(pos.begin(), pos.end(), begin);
      const Tensor z = m.forward_heads(model_input(make_batch(train, pos), train, m.dtype())).cls;
      std::vector<std::size_t> y(pos.size());
      for (std::size_t i = 0; i < pos.size(); ++i) y[i] = train.labels[pos[i]];
      total += cross_entropy(z, y, smoothing).item() * static_cast<double>(pos.size());
    }
    r.train_loss = total / static_cast<double>(train.size());
  }
  r.train_acc = topk_accuracy(logits, train.labels).top1;
  fill_test(r, m, test);
  r.seconds = seconds_since(t0);
  return r;
}

template <class StepFn>
TrainReport run_training(Model& m, const Dataset& train, const Dataset* test, const TrainConfig& cfg, StepFn&& step) {
  if (train.size() == 0) throw ContractError("training: empty dataset");
  cfg.augment.validate();
  Optimizer opt(m.params(), cfg.optimizer);
  TrainReport report;
  report.epochs.push_back(initial_record(m, train, test, cfg.label_smoothing));
  if (cfg.on_epoch) cfg.on_epoch(report.epochs.back());
  BatchOptions bo;
  bo.batch_size = cfg.batch_size;
  bo.seed = cfg.seed;
  bo.augment = cfg.augment;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto t0 = Clock::now();
    BatchStream stream(train, bo, e);
    const double steps = static_cast<double>(stream.num_batches());
    Rng drop(derive_seed(cfg.seed, 0x5eed0000 + e));
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0, k = 0;
    while (auto batch = stream.next()) {
      const double lr = scheduled_lr(cfg.optimizer, static_cast<double>(e - 1) + static_cast<double>(k) / steps,
                                     static_cast<double>(cfg.epochs));
      ++k;
      m.params().zero_grad();
      double loss = 0.0;
      std::vector<std::size_t> pred;
      {
        Tape tape;
        Tape::Recording rec(tape);
        Tensor l = step(*batch, ForwardContext{true, &drop}, pred);
        loss = l.item();
        if (!std::isfinite(loss)) {
          throw TrainingError("training diverged at epoch " + std::to_string(e) + " step " + std::to_string(k) +
                              " (loss " + std::to_string(loss) + ")");
        }
        tape.backward(l);
      }
      opt.step(lr);
      report.step_losses.push_back(loss);
      loss_sum += loss * static_cast<double>(batch->size());
      seen += batch->size();
      correct += count_correct(pred, batch->labels);
    }
    EpochRecord r;
    r.epoch = e;
    r.train_loss = loss_sum / static_cast<double>(seen);
    r.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    fill_test(r, m, test);
    r.seconds = seconds_since(t0);
    report.epochs.push_back(r);
    if (cfg.on_epoch) cfg.on_epoch(r);
  }
  m.params().zero_grad();
  return report;
}

Tensor batch_targets(const Batch& b, DType dt) {
  Tensor t = b.target_distribution();
  return dt == DType::f64 ? t : t.to(dt);
}

}  // namespace

TrainReport train_teacher(Model& teacher, const Dataset& train, const Dataset* test, const TrainConfig& cfg) {
  if (!teacher.spec().is_teacher()) throw ConfigError("train_teacher: model is not a teacher");
  return run_training(teacher, train, test, cfg,
                      [&](const Batch& b, const ForwardContext& ctx, std::vector<std::size_t>& pred) {
                        const Tensor z = teacher.forward(model_input(b, train, teacher.dtype()), ctx);
                        pred = argmax_rows(z);
                        if (b.mixed()) return cross_entropy(z, batch_targets(b, z.dtype()), cfg.label_smoothing);
                        return cross_entropy(z, b.labels, cfg.label_smoothing);
                      });
}

LiveTeachers::LiveTeachers(std::vector<const Model*> teachers, const Dataset& ds)
    : teachers_(std::move(teachers)), ds_(&ds) {
  if (teachers_.empty()) throw ConfigError("live teachers: at least one teacher required");
  for (const Model* t : teachers_) {
    if (!t->spec().is_teacher()) throw ConfigError("live teachers: model is not a teacher");
  }
}

std::vector<Tensor> LiveTeachers::logits(const Batch& batch) {
  const Tensor clean = normalize_images(ds_->gather(batch.positions), *ds_);
  std::vector<Tensor> out;
  for (const Model* t : teachers_) {
    out.push_back(t->forward(t->dtype() == DType::f32 ? clean : clean.to(t->dtype())));
    ++calls_;
  }
  return out;
}

TrainReport distill_student(Model& student, const Dataset& train, const Dataset* test, TeacherSource* teachers,
                            const DistillConfig& dcfg, const TrainConfig& cfg) {
  if (student.spec().family != Family::vit_student) throw ConfigError("distill_student: model is not a ViT student");
  const bool uses_teachers = dcfg.mode != DistillMode::none;
  if (uses_teachers && !teachers) throw ConfigError("distill_student: distillation needs live teachers or a cache");
  dcfg.validate(uses_teachers ? teachers->num_teachers() : 0);
  if (dcfg.mode == DistillMode::none || dcfg.alpha == 1.0) {
    for (const char* name : {"head_dist.weight", "head_dist.bias"}) {
      Tensor t = student.params().get(name);
      for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, 0.0);
    }
  }
  return run_training(student, train, test, cfg,
                      [&](const Batch& b, const ForwardContext& ctx, std::vector<std::size_t>& pred) {
                        const HeadLogits h = student.forward_heads(model_input(b, train, student.dtype()), ctx);
                        TeacherTargets tt;
                        if (uses_teachers) {
                          const std::vector<Tensor> clean = teachers->logits(b);
                          tt = teacher_targets(clean, dcfg, &b);
                        }
                        pred = predict_from_heads(h.cls, h.dist);
                        return kd_loss(h.cls, h.dist, tt, batch_targets(b, h.cls.dtype()), dcfg,
                                       cfg.label_smoothing);
                      });
}

}  // namespace libkd
