// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/config.hpp"

#include <charconv>
#include <sstream>

#include "binio.hpp"
#include "libkd/error.hpp"

namespace libkd {

const char* command_name(Command c) {
  switch (c) {
    case Command::train_teacher: return "train-teacher";
    case Command::cache_logits: return "cache-logits";
    case Command::distill: return "distill";
    case Command::eval: return "eval";
    case Command::analyze: return "analyze";
  }
  return "?";
}

Command parse_command(const std::string& name) {
  for (Command c : {Command::train_teacher, Command::cache_logits, Command::distill, Command::eval, Command::analyze}) {
    if (name == command_name(c)) return c;
  }
  throw ConfigError("unknown command '" + name + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(std::size_t v) { return std::to_string(v); }

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd_momentum;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("optim.kind: expected sgd or adamw, got '" + s + "'");
}

const char* rule_name(EnsembleRule r) { return r == EnsembleRule::majority_vote ? "majority_vote" : "soft_average"; }

void add_model_defaults(KeyValues& kv, Family family, Preset preset) {
  const ModelSpec s = preset_spec(family, preset);
  kv["model.family"] = family_name(family);
  if (s.is_teacher()) {
    kv["model.stage_depths"] = join(s.stage_depths);
    kv["model.base_channels"] = fmt(s.base_channels);
    kv["model.stem_channels"] = fmt(s.stem_channels);
    kv["model.expansion"] = fmt(s.expansion);
    kv["model.kernel_size"] = fmt(s.kernel_size);
    if (family == Family::inn_teacher) {
      kv["model.group_channels"] = fmt(s.group_channels);
      kv["model.reduction_ratio"] = fmt(s.reduction_ratio);
    }
  } else {
    kv["model.patch_size"] = fmt(s.patch_size);
    kv["model.embed_dim"] = fmt(s.embed_dim);
    kv["model.depth"] = fmt(s.depth);
    kv["model.num_heads"] = fmt(s.num_heads);
    kv["model.mlp_ratio"] = fmt(s.mlp_ratio);
    kv["model.drop_path_rate"] = fmt(s.drop_path_rate);
  }
}

// Teachers train with momentum SGD and the student with AdamW. Desk values
// are the scaled-down recipe the acceptance runs were tuned on.
void add_training_defaults(KeyValues& kv, bool student, bool paper) {
  OptimizerConfig o;
  std::size_t epochs = 0;
  if (student) {
    o.kind = OptimizerKind::adamw;
    o.lr = paper ? 0.05 : 5e-4;
    o.eps = 1e-6;
    o.weight_decay = 5e-4;
    o.warmup_epochs = 5;
    epochs = paper ? 1000 : 30;
  } else {
    o.kind = OptimizerKind::sgd_momentum;
    o.lr = paper ? 0.1 : 0.05;
    o.momentum = 0.9;
    o.weight_decay = 5e-4;
    o.warmup_epochs = paper ? 0 : 1;
    epochs = paper ? 1000 : 12;
  }
  kv["train.epochs"] = fmt(epochs);
  kv["train.batch_size"] = "128";
  kv["train.label_smoothing"] = "0.1";
  kv["optim.kind"] = optimizer_name(o.kind);
  kv["optim.lr"] = fmt(o.lr);
  kv["optim.momentum"] = fmt(o.momentum);
  kv["optim.weight_decay"] = fmt(o.weight_decay);
  kv["optim.beta1"] = fmt(o.beta1);
  kv["optim.beta2"] = fmt(o.beta2);
  kv["optim.eps"] = fmt(o.eps);
  kv["optim.warmup_epochs"] = fmt(o.warmup_epochs);
  kv["optim.min_lr"] = fmt(o.min_lr);
  const AugmentConfig a;
  kv["augment.enabled"] = "false";
  kv["augment.mixup_alpha"] = fmt(a.mixup_alpha);
  kv["augment.cutmix_alpha"] = fmt(a.cutmix_alpha);
  kv["augment.mixup_prob"] = fmt(a.mixup_prob);
  kv["augment.color_jitter"] = fmt(a.color_jitter);
  kv["augment.random_erase"] = fmt(a.random_erase);
}

KeyValues defaults(Command cmd, Preset preset, std::uint64_t seed, const std::string& family) {
  const bool paper = preset == Preset::paper;
  KeyValues kv;
  kv["run.preset"] = paper ? "paper" : "desk";
  kv["run.seed"] = std::to_string(seed);
  kv["run.out"] = "out";
  kv["data.path"] = "synth";
  kv["data.format"] = paper ? "cifar100" : "cifar10";
  kv["data.image_size"] = paper ? "32" : "16";
  const SyntheticSpec syn;
  kv["synth.classes"] = fmt(syn.num_classes);
  kv["synth.per_class"] = fmt(syn.samples_per_class);
  kv["synth.test_per_class"] = fmt(syn.test_samples_per_class);
  kv["synth.noise"] = fmt(syn.noise);
  kv["synth.seed"] = std::to_string(seed);
  switch (cmd) {
    case Command::train_teacher: {
      const Family f = parse_family(family.empty() ? "cnn" : family);
      if (f == Family::vit_student) throw ConfigError("train-teacher: model.family must be a teacher (cnn or inn)");
      add_model_defaults(kv, f, preset);
      add_training_defaults(kv, false, paper);
      break;
    }
    case Command::distill: {
      if (!family.empty() && parse_family(family) != Family::vit_student) {
        throw ConfigError("distill: model.family must be vit");
      }
      add_model_defaults(kv, Family::vit_student, preset);
      add_training_defaults(kv, true, paper);
      const DistillConfig d;
      kv["distill.mode"] = mode_name(d.mode);
      kv["distill.alpha"] = fmt(d.alpha);
      kv["distill.temperature"] = fmt(d.temperature);
      kv["distill.rule"] = rule_name(d.rule);
      kv["distill.weights"] = "";
      kv["distill.teacher_ids"] = "";
      kv["distill.cache"] = "";
      kv["distill.teachers"] = "";
      break;
    }
    case Command::cache_logits:
      kv["cache.teachers"] = "";
      kv["cache.ids"] = "";
      kv["cache.workers"] = "0";
      kv["cache.verify_fraction"] = "0.05";
      break;
    case Command::eval:
      kv["eval.models"] = "";
      kv["eval.rule"] = "soft_average";
      kv["eval.weights"] = "";
      break;
    case Command::analyze:
      kv["analyze.a"] = "";
      kv["analyze.b"] = "";
      kv["analyze.probe"] = "64";
      kv["analyze.minimizer_samples"] = "32";
      break;
  }
  return kv;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

// A layered lookup used before the defaults exist: flag, then file, then fallback.
std::string early(const std::string& key, const KeyValues& file, const KeyValues& flags, const std::string& fallback) {
  if (auto it = flags.find(key); it != flags.end()) return it->second;
  if (auto it = file.find(key); it != file.end()) return it->second;
  return fallback;
}

}  // namespace

KeyValues parse_config_text(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    if (!kv.emplace(key, trim(t.substr(eq + 1))).second) {
      throw ConfigError("config line " + std::to_string(n) + ": repeated key '" + key + "'");
    }
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

RunConfig RunConfig::resolve(Command cmd, const KeyValues& file, const KeyValues& flags) {
  const Preset preset = parse_preset(early("run.preset", file, flags, "desk"));
  const auto seed = parse_number<std::uint64_t>("run.seed", early("run.seed", file, flags, "0"));
  RunConfig rc;
  rc.cmd_ = cmd;
  rc.kv_ = defaults(cmd, preset, seed, early("model.family", file, flags, ""));
  for (const KeyValues* layer : {&file, &flags}) {
    for (const auto& [k, v] : *layer) {
      auto it = rc.kv_.find(k);
      if (it == rc.kv_.end()) {
        throw ConfigError(std::string(command_name(cmd)) + ": unknown setting '" + k + "'");
      }
      it->second = v;
    }
  }
  // Canonical family spelling, so "inn" and "inn_teacher" resolve identically.
  if (rc.has("model.family")) rc.kv_["model.family"] = family_name(parse_family(rc.str("model.family")));
  return rc;
}

const std::string& RunConfig::str(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError(std::string(command_name(cmd_)) + ": no setting '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const { return parse_number<double>(key, str(key)); }
std::size_t RunConfig::count(const std::string& key) const { return parse_number<std::size_t>(key, str(key)); }
std::uint64_t RunConfig::u64(const std::string& key) const { return parse_number<std::uint64_t>(key, str(key)); }

bool RunConfig::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> RunConfig::list(const std::string& key) const {
  std::vector<std::string> out;
  const std::string& v = str(key);
  if (v.empty()) return out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(key + ": empty list item in '" + v + "'");
    out.push_back(item);
  }
  return out;
}

std::vector<double> RunConfig::reals(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& s : list(key)) out.push_back(parse_number<double>(key, s));
  return out;
}

std::vector<std::size_t> RunConfig::counts(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const std::string& s : list(key)) out.push_back(parse_number<std::size_t>(key, s));
  return out;
}

std::string RunConfig::to_text() const {
  std::string out = "# libkd " + std::string(command_name(cmd_)) + "\n";
  for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
  return out;
}

void RunConfig::write(const std::filesystem::path& path) const {
  const std::string t = to_text();
  binio::write_file(path, std::vector<std::uint8_t>(t.begin(), t.end()));
}

std::pair<Dataset, Dataset> load_run_data(const RunConfig& cfg) {
  const std::string& path = cfg.str("data.path");
  if (path == "synth") {
    SyntheticSpec s;
    s.num_classes = cfg.count("synth.classes");
    s.samples_per_class = cfg.count("synth.per_class");
    s.test_samples_per_class = cfg.count("synth.test_per_class");
    s.image_size = cfg.count("data.image_size");
    s.noise = cfg.real("synth.noise");
    s.seed = cfg.u64("synth.seed");
    return synthetic_dataset(s);
  }
  const std::string& format = cfg.str("data.format");
  CifarVariant v;
  if (format == "cifar10") {
    v = CifarVariant::cifar10;
  } else if (format == "cifar100") {
    v = CifarVariant::cifar100;
  } else {
    throw ConfigError("data.format: expected cifar10 or cifar100, got '" + format + "'");
  }
  return load_cifar_binary(path, v, cfg.count("data.image_size"));
}

ModelSpec run_model_spec(const RunConfig& cfg, const Dataset& train) {
  const Family f = parse_family(cfg.str("model.family"));
  ModelSpec s = preset_spec(f, parse_preset(cfg.str("run.preset")));
  s.num_classes = train.num_classes;
  s.image_size = train.image_size();
  s.in_channels = train.channels();
  if (s.is_teacher()) {
    s.stage_depths = cfg.counts("model.stage_depths");
    if (s.stage_depths.size() != s.strides.size()) {
      throw ConfigError("model.stage_depths: expected " + std::to_string(s.strides.size()) + " stages");
    }
    s.base_channels = cfg.count("model.base_channels");
    s.stem_channels = cfg.count("model.stem_channels");
    s.expansion = cfg.count("model.expansion");
    s.kernel_size = cfg.count("model.kernel_size");
    if (f == Family::inn_teacher) {
      s.group_channels = cfg.count("model.group_channels");
      s.reduction_ratio = cfg.count("model.reduction_ratio");
    }
  } else {
    s.patch_size = cfg.count("model.patch_size");
    s.embed_dim = cfg.count("model.embed_dim");
    s.depth = cfg.count("model.depth");
    s.num_heads = cfg.count("model.num_heads");
    s.mlp_ratio = cfg.real("model.mlp_ratio");
    s.drop_path_rate = cfg.real("model.drop_path_rate");
  }
  s.validate();
  return s;
}

TrainConfig run_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.count("train.epochs");
  t.batch_size = cfg.count("train.batch_size");
  t.seed = cfg.u64("run.seed");
  t.label_smoothing = cfg.real("train.label_smoothing");
  OptimizerConfig& o = t.optimizer;
  o.kind = parse_optimizer(cfg.str("optim.kind"));
  o.lr = cfg.real("optim.lr");
  o.momentum = cfg.real("optim.momentum");
  o.weight_decay = cfg.real("optim.weight_decay");
  o.beta1 = cfg.real("optim.beta1");
  o.beta2 = cfg.real("optim.beta2");
  o.eps = cfg.real("optim.eps");
  o.warmup_epochs = cfg.real("optim.warmup_epochs");
  o.min_lr = cfg.real("optim.min_lr");
  o.validate();
  AugmentConfig& a = t.augment;
  a.enabled = cfg.flag("augment.enabled");
  a.mixup_alpha = cfg.real("augment.mixup_alpha");
  a.cutmix_alpha = cfg.real("augment.cutmix_alpha");
  a.mixup_prob = cfg.real("augment.mixup_prob");
  a.color_jitter = cfg.real("augment.color_jitter");
  a.random_erase = cfg.real("augment.random_erase");
  a.validate();
  return t;
}

DistillConfig run_distill_config(const RunConfig& cfg) {
  DistillConfig d;
  d.mode = parse_mode(cfg.str("distill.mode"));
  d.alpha = cfg.real("distill.alpha");
  d.temperature = cfg.real("distill.temperature");
  d.rule = parse_rule(cfg.str("distill.rule"));
  d.teacher_weights = cfg.reals("distill.weights");
  d.teacher_ids = cfg.list("distill.teacher_ids");
  d.validate();
  return d;
}

}  // namespace libkd
