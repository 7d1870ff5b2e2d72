#pragma once

// Config-driven pipeline: prepare data, train the source model, capture its
// feature statistics, run every requested method on a fresh copy of that
// model, evaluate and write the report files.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssa/adapt.hpp"
#include "ssa/data.hpp"
#include "ssa/netcore.hpp"
#include "ssa/report.hpp"

namespace ssa {

enum class MethodKind { Source, Alignment, BnAdapt, Prototype, Oracle };

struct MethodSpec {
  std::string label;  // name used in reports
  MethodKind kind = MethodKind::Source;
  AdaptConfig adapt;            // Alignment only
  TrainConfig oracle;           // Oracle only
  ForwardMode eval_mode = ForwardMode::Eval;
  nlohmann::json resolved;      // the fully-defaulted method block
};

struct DatasetConfig {
  enum class Kind { Synthetic, Csv };
  Kind kind = Kind::Synthetic;
  ShiftSpec shift;
  Index n_source = 2000;
  Index n_target = 2000;
  std::uint64_t seed = 0;
  std::filesystem::path csv_path;
  std::string label_column;
  SplitRule split;
  double validation_fraction = 0.1;
  bool standardize = true;
};

struct ExperimentConfig {
  nlohmann::json resolved;  // input tree with every default filled in
  DatasetConfig dataset;
  std::vector<Index> hidden;
  std::uint64_t model_seed = 0;
  TrainConfig source_training;
  std::size_t statistics_k = 100;
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;
};

/// Reads a JSON config file; IoError when unreadable, ConfigError when malformed.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Applies "a.b.2.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise. Missing objects along the path are created.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// Validates the tree and fills in defaults. Throws ConfigError.
/// Relative paths resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const nlohmann::json& tree,
                                         const std::filesystem::path& base_dir = {});

/// Parses "1,2,3".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Human-readable plan: data, model, training, every method with its
/// resolved settings, seeds and the files that would be written.
std::string describe_plan(const ExperimentConfig& config);

struct PreparedData {
  TabularDataset source_train;
  TabularDataset source_val;
  TabularDataset target;
  std::vector<std::string> dropped_features;
  std::size_t dropped_rows = 0;
};

PreparedData prepare_data(const DatasetConfig& config);

struct ExperimentResult {
  std::vector<ExperimentRecord> records;
  RegressionModel source_model;
  SourceStatistics source_stats;
  bool any_diverged = false;
};

/// Runs the whole pipeline. With write_files, the output directory receives
/// checkpoint.json, subspace.json, report.{json,csv}, summary.csv,
/// trace.jsonl, scatter.csv and the standardized source/target CSVs.
ExperimentResult run_experiment(const ExperimentConfig& config, bool write_files = true);

struct Inspection {
  std::size_t feature_dim = 0;
  std::size_t valid_dims = 0;
  std::size_t rank = 0;
  std::vector<double> spectrum;  // descending eigenvalues
  std::optional<double> eigen_weight_correlation;  // over the top min(100, rank) pairs
  std::vector<double> sensitivity;                // same subspace
};

/// Feature diagnostics of `model` over `inputs` (Eval mode). Throws
/// ConfigError when the input width does not match the model.
Inspection inspect_model(const RegressionModel& model, const Matrix& inputs);
void print_inspection(const Inspection& inspection, std::ostream& out);

}  // namespace ssa
