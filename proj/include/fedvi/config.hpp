#pragma once

// Line-oriented experiment configuration:
//
//   # comment
//   [section]
//   key = value
//
// Sections are run, data, arch, train, bound and ablate; keys that appear
// before any section header belong to [run]. Lists are comma separated.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedvi/bounds.hpp"
#include "fedvi/datagen.hpp"
#include "fedvi/federation.hpp"
#include "fedvi/model.hpp"

namespace fedvi::config {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& msg, std::string key = {}, std::size_t line = 0);
  const std::string& key() const { return key_; }
  /// 1-based line in the source text, 0 when the value was not read from it.
  std::size_t line() const { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

class ConfigIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Source { Default, File, CommandLine };

struct Entry {
  std::string key;  // "section.name"
  std::string value;
  Source source = Source::Default;
  std::size_t line = 0;
};

struct ExperimentConfig {
  std::string label = "fedvi";
  std::uint64_t seed = 0;
  /// Seed of the synthetic generator; follows `seed` unless set explicitly.
  std::optional<std::uint64_t> data_seed;
  /// Binary dataset to load instead of generating one.
  std::string dataset;
  std::string out_dir = "out";
  std::string params;  // saved parameters for bound / eval

  data::GenConfig gen;
  model::ArchConfig arch;
  fed::TrainConfig train;
  bounds::PacBayesConfig bound;
  std::size_t bound_trials = 100;
  std::vector<double> taus{0.0, 1e-6, 1e-4, 1e-2, 1.0};

  std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
  /// GenConfig with the effective data seed filled in.
  data::GenConfig generator() const;

  /// Every key with its resolved value and where it came from.
  std::vector<Entry> entries() const;
  Source source_of(const std::string& key) const;
  void mark(const std::string& key, Source s, std::size_t line = 0);

  /// Cross-field checks; arch dimensions are synced from the data section.
  void validate() const;

 private:
  std::vector<Entry> origin_;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Serialises every key in the documented format; parsing it back yields the same config.
std::string to_config_text(const ExperimentConfig& cfg);

/// Sets one key ("section.name" or a bare [run] key) from a string value.
void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value, Source source,
               std::size_t line = 0);

}  // namespace fedvi::config
