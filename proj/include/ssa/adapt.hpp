#pragma once

// Optimizer, source training, the subspace-alignment TTA loop and the
// Source / BN-adapt / Prototype / Oracle baselines.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssa/alignstat.hpp"
#include "ssa/data.hpp"
#include "ssa/netcore.hpp"

namespace ssa {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Bias-corrected Adam (Kingma & Ba) over one flat parameter vector.
struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  Vector m;
  Vector v;

  AdamState() = default;
  AdamState(const AdamConfig& cfg, Index size)
      : config(cfg), m(Vector::Zero(size)), v(Vector::Zero(size)) {}
};

enum class StepStatus { Applied, SkippedNonFinite };

/// One Adam update in place. A non-finite gradient leaves params, moments and
/// the step counter untouched and reports SkippedNonFinite.
StepStatus adam_step(AdamState& state, Vector& params, const Vector& grads);

struct IterationRecord {
  int epoch = 0;
  std::size_t iter = 0;
  double loss = 0.0;
  double seconds = 0.0;  // since the start of the run
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t batches = 0;
};

struct RunTrace {
  std::vector<IterationRecord> iterations;
  std::vector<EpochRecord> epochs;
  std::map<std::string, double> phase_seconds;
  bool diverged = false;
  std::string divergence_reason;
  std::size_t dropped_rows = 0;
  std::size_t skipped_steps = 0;

  double first_loss() const;
  double last_loss() const;
};

/// Appends one JSON object per iteration: {"epoch", "iter", "loss",
/// "timestamp"} plus the fields of `tags` (e.g. method and seed).
void write_trace_jsonl(const RunTrace& trace, const std::filesystem::path& path,
                       const nlohmann::json& tags = nlohmann::json::object());

struct TrainConfig {
  int epochs = 100;
  double lr = 1e-3;
  Index batch_size = 64;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
};

/// Everything captured from the source domain after training: raw feature
/// moments, the full covariance eigendecomposition, its numeric rank and the
/// top-K subspace with weights from the trained head.
struct SourceStatistics {
  FeatureStats raw;
  EigenDecomposition<double> eig;
  std::size_t rank = 0;
  std::size_t valid_dims = 0;
  SubspaceStats subspace;
};

/// Eval-mode features of the whole set in one pass.
Matrix extract_features(const RegressionModel& model, const Matrix& inputs,
                        ForwardMode mode = ForwardMode::Eval, Index batch_size = 64);

/// Predictions for every row. Batch-statistic modes run over contiguous
/// chunks of batch_size (a trailing single row joins the previous chunk) and
/// never update running statistics.
Vector predict(const RegressionModel& model, const Matrix& inputs, ForwardMode mode,
               Index batch_size = 64);

/// K is lowered to the numeric rank (with a warning on stderr) when larger.
SourceStatistics compute_source_statistics(const RegressionModel& model, const Matrix& inputs,
                                           std::size_t k);

/// Lowers `requested` to the rank with a warning; returns the effective K.
std::size_t resolve_subspace_k(std::size_t requested, std::size_t rank);

/// Supervised MSE training of the selected parameters in Train mode.
/// Throws DivergenceError on a non-finite loss.
RunTrace fit_mse(RegressionModel& model, const TabularDataset& data, const TrainConfig& cfg,
                 ParamSelector selector = ParamSelector::All);

struct SourceFit {
  SourceStatistics stats;
  RunTrace trace;
};

/// Source pre-training followed by statistics capture over the same data.
SourceFit train_source(RegressionModel& model, const TabularDataset& source,
                       const TrainConfig& cfg, std::size_t k = 100);

enum class AdaptMode { Offline, BatchedOnline };

struct AdaptConfig {
  std::size_t k = 100;
  AlignmentVariant variant;
  bool dimension_weighting = true;
  double lr = 1e-3;
  Index batch_size = 64;
  int epochs = 1;
  AdaptMode mode = AdaptMode::Offline;
  ParamSelector param_selector = ParamSelector::NormAffineOnly;
  ForwardMode adapt_forward = ForwardMode::BatchStat;
  std::uint64_t seed = 0;
};

struct TtaResult {
  RunTrace trace;
  std::size_t effective_k = 0;
  // BatchedOnline: prediction for every target row, produced before the
  // update on its batch.
  std::optional<Vector> online_predictions;
};

/// Test-time adaptation by feature alignment. Each mini-batch: extract
/// features, evaluate the configured alignment loss against the source
/// statistics, backpropagate and take an Adam step on the selected
/// parameters only. A non-finite loss or parameter stops the run with
/// trace.diverged set; parameters stay at their last finite values.
TtaResult run_tta(RegressionModel& model, const SourceStatistics& source, const Matrix& target,
                  const AdaptConfig& cfg);

/// Refresh normalization running statistics with Train-mode passes over the
/// target; no gradient step.
void baseline_bn_adapt(RegressionModel& model, const Matrix& target, Index batch_size);

/// Replace the head weight with the running mean of the arriving feature
/// batches. An empty stream leaves the model unchanged.
void baseline_prototype(RegressionModel& model, const std::vector<Matrix>& feature_batches);

/// Prototype over Eval-mode features of the target, in chunks of batch_size.
void baseline_prototype(RegressionModel& model, const Matrix& target, Index batch_size);

/// Supervised fine-tuning of all parameters on labeled target data.
RunTrace baseline_oracle(RegressionModel& model, const TabularDataset& labeled_target,
                         const TrainConfig& cfg);

const char* to_string(AlignmentMetric metric);
const char* to_string(AlignmentSpace space);
const char* to_string(AdaptMode mode);
AdaptMode parse_adapt_mode(const std::string& name);

}  // namespace ssa
