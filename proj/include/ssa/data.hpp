#pragma once

// Datasets: seeded covariate-shift generators, CSV ingestion with a domain
// split, source-fitted standardization and deterministic mini-batching.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssa/linalg.hpp"

namespace ssa {

struct TabularDataset {
  Matrix inputs;                  // N x d_in
  std::optional<Vector> labels;   // N when present
  std::vector<std::string> feature_names;
  std::string domain_tag;

  Index size() const { return inputs.rows(); }
  Index width() const { return inputs.cols(); }

  /// Throws ConfigError when labels are present with the wrong length or
  /// inputs are not finite.
  void validate() const;
};

TabularDataset select_rows(const TabularDataset& ds, const std::vector<Index>& rows);

/// x = mean + factor * eps, eps ~ N(0, I).
struct GaussianLaw {
  Vector mean;
  Matrix factor;
};

/// Labelling function shared by both domains.
///   linear:   y = coef . x + bias
///   tanh_net: y = out_w . tanh(hidden_w x + hidden_b) + bias
struct GroundTruth {
  enum class Kind { Linear, TanhNet };
  Kind kind = Kind::Linear;
  Vector coef;
  Matrix hidden_w;
  Vector hidden_b;
  Vector out_w;
  double bias = 0.0;

  double operator()(const Vector& x) const;
  Vector operator()(const Matrix& xs) const;

  static GroundTruth linear(Vector coef, double bias);
  /// Random network over `dim` inputs with `hidden` tanh units, seeded.
  static GroundTruth tanh_net(Index dim, Index hidden, std::uint64_t seed);
};

struct ShiftSpec {
  GaussianLaw source;
  GaussianLaw target;
  GroundTruth truth;
  double noise_std = 0.0;

  Index dim() const { return source.mean.size(); }
};

/// Labeled source and target samples; the target keeps its labels for
/// evaluation only. Throws ConfigError on rank-deficient factors or shape
/// mismatches.
std::pair<TabularDataset, TabularDataset> generate_shift_pair(const ShiftSpec& spec,
                                                              Index n_source, Index n_target,
                                                              std::uint64_t seed);

/// The seeded suite of synthetic covariate shifts used by the benchmarks.
std::vector<ShiftSpec> synthetic_shift_suite(std::size_t count, std::uint64_t seed);

/// Declarative ShiftSpec block:
///   {"dim", "hidden", "truth_seed", "noise_std", "source": {"mean", "scale"},
///    "target": {"mean", "scale"}}  or  {"suite_index", "suite_seed"}.
ShiftSpec shift_spec_from_json(const nlohmann::json& j);

/// Domain predicate over one CSV column.
struct SplitRule {
  enum class Kind { Categorical, Threshold };
  Kind kind = Kind::Categorical;
  std::string column;
  std::vector<std::string> source_values;  // Categorical: these values form the source
  double threshold = 0.0;                  // Threshold: value < threshold is source when
  bool source_below = true;                //   source_below, value >= threshold otherwise

  /// Inland rows as source, every coastal proximity category as target.
  static SplitRule california_default();
};

struct CsvSplit {
  TabularDataset source;
  TabularDataset target;
  std::size_t dropped_rows = 0;  // rows with a missing cell
};

/// RFC-4180 CSV with a header row. The label column and a categorical split
/// column are removed from the inputs; a numeric threshold column stays.
CsvSplit load_csv(const std::filesystem::path& path, const std::string& label_column,
                  const SplitRule& rule);

/// Header plus one row per sample, label last when present, 17 significant digits.
void write_csv(const TabularDataset& ds, const std::filesystem::path& path,
               const std::string& label_column = "label");

/// Reads a headered numeric CSV back into a dataset; `label_column` (if
/// non-empty and present) becomes the labels.
TabularDataset read_numeric_csv(const std::filesystem::path& path,
                                const std::string& label_column = "");

struct Standardizer {
  std::vector<Index> retained;  // source columns kept (non-constant)
  Vector mean;                  // per retained column
  Vector std;
  std::vector<std::string> dropped;
  std::optional<double> label_mean;
  std::optional<double> label_std;
};

/// Mean and population std per column over the source; constant columns are
/// dropped (listed in `dropped`). Labels get their own scale when present.
Standardizer fit_standardizer(const TabularDataset& source);
TabularDataset apply(const Standardizer& standardizer, const TabularDataset& ds);

struct BatchPlan {
  std::vector<std::vector<Index>> batches;
  std::size_t dropped_rows = 0;
};

/// Contiguous batches over a (seeded) permutation of 0..n-1. A final short
/// batch is kept only when it has at least 2 rows.
BatchPlan make_batches(Index n, Index batch_size, bool shuffle, std::uint64_t seed);

/// Contiguous evaluation chunks covering every row; a trailing single row is
/// merged into the previous chunk so batch statistics stay defined.
std::vector<std::vector<Index>> evaluation_chunks(Index n, Index batch_size);

Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows);
Vector gather_rows(const Vector& v, const std::vector<Index>& rows);

}  // namespace ssa
