#pragma once

// Regression metrics, experiment records and their JSON / CSV serialization,
// plus the 2-D projection export used for feature scatter plots.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssa/alignstat.hpp"

namespace ssa {

/// 1 - sum (pred - truth)^2 / sum (truth - mean)^2. May be negative.
double r2(const Vector& pred, const Vector& truth);
double rmse(const Vector& pred, const Vector& truth);
double mae(const Vector& pred, const Vector& truth);

struct MetricsRecord {
  double r2 = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::size_t n = 0;
};

/// r2 is NaN (serialized as null) when the truth is constant.
MetricsRecord evaluate(const Vector& pred, const Vector& truth);

struct Diagnostics {
  std::optional<std::size_t> valid_dims;
  std::optional<std::size_t> subspace_rank;
  std::optional<std::size_t> subspace_k;
  std::optional<double> eigen_weight_correlation;
  std::vector<double> reconstruction_curve;
  std::vector<double> skewness;         // per projected target dimension
  std::vector<double> excess_kurtosis;  // per projected target dimension
};

struct ExperimentRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::string status = "ok";  // ok | diverged | error
  std::string message;
  std::string config_hash;
  nlohmann::json config;  // resolved method config
  std::map<std::string, MetricsRecord> metrics;  // keyed by domain
  Diagnostics diagnostics;
  std::map<std::string, double> timing;
};

/// 16 hex digits of 64-bit FNV-1a over the compact (sorted-key) JSON dump.
std::string config_hash(const nlohmann::json& config);

nlohmann::json to_json(const ExperimentRecord& record);
ExperimentRecord record_from_json(const nlohmann::json& j);

/// <dir>/report.json (all records), <dir>/report.csv (one row per
/// method x domain x seed) and <dir>/summary.csv (mean and std over seeds).
void write_report(const std::vector<ExperimentRecord>& records, const std::filesystem::path& dir);
std::vector<ExperimentRecord> read_report(const std::filesystem::path& dir);

std::string report_json_text(const std::vector<ExperimentRecord>& records);
std::string report_csv_text(const std::vector<ExperimentRecord>& records);
std::string summary_csv_text(const std::vector<ExperimentRecord>& records);

/// Rows (domain_tag, pc1, pc2) from the top-2 source basis vectors.
/// Throws DimensionError when the subspace has fewer than two directions.
void export_pca_scatter(const Matrix& source_features, const Matrix& target_features,
                        const SubspaceStats& sub, const std::filesystem::path& path);

/// Shortest decimal text that reads back to the same double (17 significant
/// digits at most); "nan" for NaN.
std::string format_double(double value);

}  // namespace ssa
