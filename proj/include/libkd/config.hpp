// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "libkd/data.hpp"
#include "libkd/distillation.hpp"
#include "libkd/models.hpp"

namespace libkd {

enum class Command : std::uint8_t { train_teacher, cache_logits, distill, eval, analyze };

const char* command_name(Command c);
Command parse_command(const std::string& name);

/// Flat "section.key" -> value pairs.
using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" lines. Blank lines and lines starting with '#' are
/// skipped. Throws ConfigError (with the line number) on a line without '='
/// or a repeated key.
KeyValues parse_config_text(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& path);

/// Every setting of one command, fully resolved. Resolution order: built-in
/// defaults for (command, run.preset, model.family), then the config file,
/// then flags. Keys the command does not know are rejected, so a resolved
/// file fed back through --config reproduces the run exactly.
class RunConfig {
 public:
  static RunConfig resolve(Command cmd, const KeyValues& file = {}, const KeyValues& flags = {});

  Command command() const { return cmd_; }
  const KeyValues& values() const { return kv_; }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  /// Comma-separated list; empty string gives an empty list.
  std::vector<std::string> list(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  std::vector<std::size_t> counts(const std::string& key) const;

  /// One "key=value" line per setting, sorted by key, after a command line.
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;

 private:
  Command cmd_ = Command::train_teacher;
  KeyValues kv_;
};

/// Train and test splits named by data.path ("synth" or a CIFAR binary
/// directory read as data.format).
std::pair<Dataset, Dataset> load_run_data(const RunConfig& cfg);
/// Model architecture from the preset plus model.* overrides, sized for the data.
ModelSpec run_model_spec(const RunConfig& cfg, const Dataset& train);
TrainConfig run_train_config(const RunConfig& cfg);
DistillConfig run_distill_config(const RunConfig& cfg);

}  // namespace libkd
