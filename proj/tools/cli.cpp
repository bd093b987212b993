// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>

#include "libkd/analysis.hpp"
#include "libkd/cache.hpp"
#include "libkd/config.hpp"
#include "libkd/error.hpp"

namespace libkd {
namespace {

namespace fs = std::filesystem;

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

// Writes through a .partial sibling and renames, so a failed write leaves no file.
void write_bytes(const fs::path& path, std::span<const char> bytes) {
  const fs::path tmp = path.string() + ".partial";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (f.flush(); !f) {
      f.close();
      fs::remove(tmp);
      throw IoError("cannot write " + path.string());
    }
  }
  fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) { write_bytes(path, text); }

fs::path output_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.str("run.out");
  fs::create_directories(dir);
  return dir;
}

std::vector<Model> load_models(const std::vector<std::string>& paths) {
  std::vector<Model> out;
  out.reserve(paths.size());
  for (const std::string& p : paths) out.push_back(load_checkpoint(p));
  return out;
}

// Teacher ids default to checkpoint file stems.
std::vector<std::string> teacher_ids(const std::vector<std::string>& paths, std::vector<std::string> ids,
                                     const char* key) {
  if (ids.empty()) {
    for (const std::string& p : paths) ids.push_back(fs::path(p).stem().string());
  }
  if (ids.size() != paths.size()) throw ConfigError(std::string(key) + ": one id per teacher checkpoint required");
  return ids;
}

void print_epoch(std::ostream& out, const EpochRecord& r) {
  out << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.train_loss << "  train "
      << r.train_acc << "  top1 " << r.test_top1 << "  top5 " << r.test_top5 << "  (" << std::setprecision(1)
      << r.seconds << " s)" << std::defaultfloat << std::endl;
}

void write_run(const RunConfig& cfg, const Model& m, const TrainReport& report, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  save_checkpoint(m, dir / "model.ckpt");
  report.write_csv(dir / "report.csv");
  cfg.write(dir / "resolved.cfg");
  const EpochRecord& f = report.final();
  out << "top1 " << num(f.test_top1) << " top5 " << num(f.test_top5) << "\n";
  out << "wrote " << (dir / "model.ckpt").string() << "\n";
}

void cmd_train_teacher(const RunConfig& cfg, std::ostream& out) {
  const auto [train, test] = load_run_data(cfg);
  const ModelSpec spec = run_model_spec(cfg, train);
  Model m(spec, cfg.u64("run.seed"));
  TrainConfig tc = run_train_config(cfg);
  tc.on_epoch = [&](const EpochRecord& r) { print_epoch(out, r); };
  const TrainReport report = train_teacher(m, train, &test, tc);
  write_run(cfg, m, report, out);
}

void cmd_cache_logits(const RunConfig& cfg, std::ostream& out) {
  const auto paths = cfg.list("cache.teachers");
  if (paths.empty()) throw ConfigError("cache-logits: cache.teachers lists no checkpoints");
  const auto ids = teacher_ids(paths, cfg.list("cache.ids"), "cache.ids");
  const std::vector<Model> models = load_models(paths);
  std::vector<NamedTeacher> named;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (!models[i].spec().is_teacher()) throw ConfigError("cache-logits: " + paths[i] + " is not a teacher");
    named.push_back({&models[i], ids[i]});
  }
  const auto [train, test] = load_run_data(cfg);
  const auto bytes = serialize_logit_cache(named, train, cfg.count("cache.workers"));
  // Self-check before anything is written: a fraction of records is recomputed
  // and every descriptor CRC is compared with the checkpoints.
  const LogitCache cache = LogitCache::parse(bytes);
  const CacheVerifyReport v = verify_cache(cache, named, train, cfg.real("cache.verify_fraction"), cfg.u64("run.seed"));
  if (v.stale()) {
    std::string msg = "cache-logits: self-verification failed";
    for (const std::string& id : v.checkpoint_mismatch) msg += "; checkpoint CRC mismatch for '" + id + "'";
    if (!v.stale_ids.empty()) msg += "; " + std::to_string(v.stale_ids.size()) + " stale record(s)";
    throw CorruptionError(msg);
  }
  const fs::path dir = output_dir(cfg);
  write_bytes(dir / "logits.lkdl", std::span(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  cfg.write(dir / "resolved.cfg");
  out << "cached " << cache.num_samples() << " samples x " << cache.num_teachers() << " teachers, verified "
      << v.records_checked << " records\n";
  out << "wrote " << (dir / "logits.lkdl").string() << "\n";
}

void cmd_distill(const RunConfig& cfg, std::ostream& out) {
  const auto [train, test] = load_run_data(cfg);
  DistillConfig dcfg = run_distill_config(cfg);
  const std::string cache_path = cfg.str("distill.cache");
  const auto teacher_paths = cfg.list("distill.teachers");
  std::vector<Model> live_models = load_models(teacher_paths);
  std::optional<LogitCache> cache;
  std::unique_ptr<TeacherSource> source;
  if (!cache_path.empty()) {
    cache = LogitCache::open(cache_path);
    // Checkpoints given alongside a cache must be the ones it was built from.
    const auto ids = teacher_ids(teacher_paths, {}, "distill.teachers");
    for (std::size_t i = 0; i < live_models.size(); ++i) {
      const std::size_t t = cache->teacher_index(ids[i]);
      if (cache->teachers()[t].checkpoint_crc != checkpoint_crc(live_models[i])) {
        throw CorruptionError("distill: checkpoint CRC of '" + teacher_paths[i] + "' does not match cache teacher '" +
                              ids[i] + "'");
      }
    }
    source = std::make_unique<CachedTeachers>(*cache, train, dcfg.teacher_ids);
  } else if (!live_models.empty()) {
    std::vector<const Model*> ptrs;
    for (const Model& m : live_models) ptrs.push_back(&m);
    source = std::make_unique<LiveTeachers>(ptrs, train);
  } else if (dcfg.mode != DistillMode::none) {
    throw ConfigError("distill: set distill.cache or distill.teachers (or distill.mode=none)");
  }
  const ModelSpec spec = run_model_spec(cfg, train);
  Model student(spec, cfg.u64("run.seed"));
  TrainConfig tc = run_train_config(cfg);
  tc.on_epoch = [&](const EpochRecord& r) { print_epoch(out, r); };
  const TrainReport report = distill_student(student, train, &test, source.get(), dcfg, tc);
  write_run(cfg, student, report, out);
}

void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const auto paths = cfg.list("eval.models");
  if (paths.empty()) throw ConfigError("eval: eval.models lists no checkpoints");
  const std::vector<Model> models = load_models(paths);
  const auto [train, test] = load_run_data(cfg);
  std::string csv = "model,top1,top5\n";
  std::vector<const Model*> ptrs;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const Accuracy a = evaluate(models[i], test);
    csv += paths[i] + "," + num(a.top1) + "," + num(a.top5) + "\n";
    out << paths[i] << "  top1 " << num(a.top1) << "  top5 " << num(a.top5) << "\n";
    ptrs.push_back(&models[i]);
  }
  if (models.size() > 1) {
    const std::string rule = cfg.str("eval.rule");
    const auto weights = cfg.reals("eval.weights");
    const Accuracy a = evaluate_ensemble(ptrs, test, parse_rule(rule), weights);
    csv += "ensemble:" + rule + "," + num(a.top1) + "," + num(a.top5) + "\n";
    out << "ensemble (" << rule << ")  top1 " << num(a.top1) << "  top5 " << num(a.top5) << "\n";
  }
  const fs::path dir = output_dir(cfg);
  write_text(dir / "eval.csv", csv);
  cfg.write(dir / "resolved.cfg");
}

void cmd_analyze(const RunConfig& cfg, std::ostream& out) {
  const std::string pa = cfg.str("analyze.a"), pb = cfg.str("analyze.b");
  if (pa.empty() || pb.empty()) throw ConfigError("analyze: set both analyze.a and analyze.b");
  const Model a = load_checkpoint(pa), b = load_checkpoint(pb);
  const auto [train, test] = load_run_data(cfg);
  const std::size_t n_probe = cfg.count("analyze.probe");
  if (n_probe > test.size()) throw ConfigError("analyze.probe exceeds the test split size");
  std::vector<std::size_t> pos(n_probe);
  for (std::size_t i = 0; i < n_probe; ++i) pos[i] = i;
  const CkaMatrix cka = cka_heatmap(a, b, normalize_images(test.gather(pos), test));

  const Tensor za = predict_logits(a, test), zb = predict_logits(b, test);
  const double dis = disagreement_rate(argmax_rows(za), argmax_rows(zb));

  // Per-sample two-member ensemble minimizer on the models' test distributions.
  const std::size_t n_min = std::min(cfg.count("analyze.minimizer_samples"), test.size());
  const Tensor pa_probs = ensemble_soft_average(std::span<const Tensor>(&za, 1)).probs;
  const Tensor pb_probs = ensemble_soft_average(std::span<const Tensor>(&zb, 1)).probs;
  const std::size_t C = za.size(1);
  const std::vector<double> lambda = {0.5, 0.5};
  double max_linf_arith = 0.0, mean_linf_geo = 0.0, mean_obj = 0.0, mean_obj_geo = 0.0, max_gap = 0.0;
  for (std::size_t n = 0; n < n_min; ++n) {
    std::vector<std::vector<double>> q(2, std::vector<double>(C));
    for (std::size_t c = 0; c < C; ++c) {
      q[0][c] = pa_probs.at(n * C + c);
      q[1][c] = pb_probs.at(n * C + c);
    }
    const KlMinimizerResult r = ensemble_kl_minimizer(q, lambda);
    max_linf_arith = std::max(max_linf_arith, r.linf_to_arithmetic);
    max_gap = std::max(max_gap, r.gap);
    mean_linf_geo += r.linf_to_geometric / static_cast<double>(n_min);
    mean_obj += r.objective / static_cast<double>(n_min);
    mean_obj_geo += r.objective_geometric / static_cast<double>(n_min);
  }

  std::string report;
  report += "disagreement_rate=" + num(dis) + "\n";
  report += "cka_mean_off_diagonal=" + num(cka.mean_off_diagonal()) + "\n";
  report += "minimizer_samples=" + std::to_string(n_min) + "\n";
  report += "minimizer_max_gap=" + num(max_gap) + "\n";
  report += "minimizer_max_linf_to_arithmetic=" + num(max_linf_arith) + "\n";
  report += "minimizer_mean_linf_to_geometric=" + num(mean_linf_geo) + "\n";
  report += "minimizer_mean_objective=" + num(mean_obj) + "\n";
  report += "minimizer_mean_objective_geometric=" + num(mean_obj_geo) + "\n";

  const fs::path dir = output_dir(cfg);
  cka.write_csv(dir / "cka.csv");
  cka.write_pgm(dir / "cka.pgm");
  write_text(dir / "analysis.txt", report);
  cfg.write(dir / "resolved.cfg");
  out << "disagreement_rate " << num(dis) << "\n" << report;
}

struct Subcommand {
  Command cmd;
  const char* help;
  // Convenience flag -> config key.
  std::vector<std::pair<const char*, const char*>> flags;
};

const std::vector<std::pair<const char*, const char*>> kCommonFlags = {
    {"--preset", "run.preset"},     {"--seed", "run.seed"},
    {"--out", "run.out"},           {"--data", "data.path"},
    {"--data-format", "data.format"}, {"--image-size", "data.image_size"},
};

const std::vector<Subcommand>& subcommands() {
  static const std::vector<Subcommand> subs = {
      {Command::train_teacher,
       "Train a CNN or INN teacher",
       {{"--family", "model.family"},
        {"--epochs", "train.epochs"},
        {"--batch-size", "train.batch_size"},
        {"--lr", "optim.lr"},
        {"--augment", "augment.enabled"}}},
      {Command::cache_logits,
       "Precompute teacher logits over the training split",
       {{"--teachers", "cache.teachers"}, {"--ids", "cache.ids"}, {"--workers", "cache.workers"}}},
      {Command::distill,
       "Train the ViT student against cached or live teachers",
       {{"--epochs", "train.epochs"},
        {"--batch-size", "train.batch_size"},
        {"--lr", "optim.lr"},
        {"--augment", "augment.enabled"},
        {"--mode", "distill.mode"},
        {"--alpha", "distill.alpha"},
        {"--temperature", "distill.temperature"},
        {"--rule", "distill.rule"},
        {"--weights", "distill.weights"},
        {"--cache", "distill.cache"},
        {"--teachers", "distill.teachers"},
        {"--teacher-ids", "distill.teacher_ids"}}},
      {Command::eval,
       "Evaluate checkpoints (and their ensemble) on the test split",
       {{"--models", "eval.models"}, {"--rule", "eval.rule"}, {"--weights", "eval.weights"}}},
      {Command::analyze,
       "CKA heatmap, disagreement rate and ensemble-minimizer report for two checkpoints",
       {{"--a", "analyze.a"}, {"--b", "analyze.b"}, {"--probe", "analyze.probe"}}},
  };
  return subs;
}

void run(Command cmd, const std::string& config_path, const std::vector<std::string>& sets, KeyValues named,
         std::ostream& out) {
  const KeyValues file = config_path.empty() ? KeyValues{} : read_config_file(config_path);
  KeyValues flags;
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    flags[s.substr(0, eq)] = s.substr(eq + 1);
  }
  for (auto& [k, v] : named) flags[k] = v;
  const RunConfig cfg = RunConfig::resolve(cmd, file, flags);
  switch (cmd) {
    case Command::train_teacher: cmd_train_teacher(cfg, out); break;
    case Command::cache_logits: cmd_cache_logits(cfg, out); break;
    case Command::distill: cmd_distill(cfg, out); break;
    case Command::eval: cmd_eval(cfg, out); break;
    case Command::analyze: cmd_analyze(cfg, out); break;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"libkd: ensemble knowledge distillation from CNN and INN teachers into a ViT student"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  KeyValues named;
  std::map<CLI::App*, Command> commands;
  for (const Subcommand& s : subcommands()) {
    CLI::App* sub = app.add_subcommand(command_name(s.cmd), s.help);
    commands[sub] = s.cmd;
    sub->add_option("--config", config_path, "Resolved config file to start from");
    sub->add_option("--set", sets, "Override any setting: section.key=value (repeatable)");
    for (const auto* list : {&kCommonFlags, &s.flags}) {
      for (const auto& [flag, key] : *list) {
        const std::string k = key;
        sub->add_option_function<std::string>(
            flag, [&named, k](const std::string& v) { named[k] = v; }, "Sets " + k);
      }
    }
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  try {
    for (const auto& [sub, cmd] : commands) {
      if (sub->parsed()) run(cmd, config_path, sets, named, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace libkd
