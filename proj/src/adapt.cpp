#include "ssa/adapt.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include "ssa/errors.hpp"

namespace ssa {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1;
}

void close_epoch(RunTrace& trace, int epoch, double loss_sum, std::size_t batches) {
  trace.epochs.push_back({epoch, batches ? loss_sum / double(batches) : 0.0, batches});
}

}  // namespace

StepStatus adam_step(AdamState& state, Vector& params, const Vector& grads) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw DimensionError("adam_step: parameter, gradient and moment lengths differ");
  if (!grads.allFinite()) return StepStatus::SkippedNonFinite;

  const auto& c = state.config;
  ++state.step;
  Vector g = grads;
  if (c.weight_decay != 0.0) g += c.weight_decay * params;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * g;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * g.cwiseProduct(g);
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  params.array() -= c.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + c.eps);
  return StepStatus::Applied;
}

double RunTrace::first_loss() const {
  return iterations.empty() ? std::numeric_limits<double>::quiet_NaN() : iterations.front().loss;
}

double RunTrace::last_loss() const {
  return iterations.empty() ? std::numeric_limits<double>::quiet_NaN() : iterations.back().loss;
}

void write_trace_jsonl(const RunTrace& trace, const std::filesystem::path& path,
                       const nlohmann::json& tags) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write trace " + path.string());
  for (const auto& it : trace.iterations) {
    nlohmann::json j = {{"epoch", it.epoch},
                        {"iter", it.iter},
                        {"loss", std::isfinite(it.loss) ? nlohmann::json(it.loss) : nlohmann::json()},
                        {"timestamp", it.seconds}};
    for (const auto& [key, value] : tags.items()) j[key] = value;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing trace " + path.string());
}

Matrix extract_features(const RegressionModel& model, const Matrix& inputs, ForwardMode mode,
                        Index batch_size) {
  if (mode == ForwardMode::Eval) return model.forward(inputs, ForwardMode::Eval).features;
  Matrix out(inputs.rows(), model.feature_dim());
  for (const auto& chunk : evaluation_chunks(inputs.rows(), batch_size)) {
    const Matrix f = model.forward(gather_rows(inputs, chunk), mode).features;
    for (std::size_t i = 0; i < chunk.size(); ++i) out.row(chunk[i]) = f.row(Index(i));
  }
  return out;
}

Vector predict(const RegressionModel& model, const Matrix& inputs, ForwardMode mode,
               Index batch_size) {
  if (mode == ForwardMode::Eval) return model.forward(inputs, ForwardMode::Eval).predictions;
  Vector out(inputs.rows());
  for (const auto& chunk : evaluation_chunks(inputs.rows(), batch_size)) {
    const Vector p = model.forward(gather_rows(inputs, chunk), mode).predictions;
    for (std::size_t i = 0; i < chunk.size(); ++i) out(chunk[i]) = p(Index(i));
  }
  return out;
}

std::size_t resolve_subspace_k(std::size_t requested, std::size_t rank) {
  if (rank == 0) throw RankError(requested, rank);
  if (requested > rank) {
    std::clog << "warning: K = " << requested << " exceeds the source feature rank " << rank
              << "; using K = " << rank << '\n';
    return rank;
  }
  return requested;
}

SourceStatistics compute_source_statistics(const RegressionModel& model, const Matrix& inputs,
                                           std::size_t k) {
  const Matrix features = extract_features(model, inputs, ForwardMode::Eval);
  SourceStatistics s;
  s.raw = feature_stats(features);
  s.valid_dims = count_valid_dims(s.raw);
  s.eig = sym_eig(covariance(features, s.raw.mean));
  s.rank = numeric_rank(s.eig.eigenvalues, kDefaultRankTol);
  const std::size_t kk = resolve_subspace_k(k, s.rank);
  s.subspace = subspace_from_eigen(s.raw.mean, s.eig, model.head_w(), kk);
  return s;
}

RunTrace fit_mse(RegressionModel& model, const TabularDataset& data, const TrainConfig& cfg,
                 ParamSelector selector) {
  if (!data.labels) throw ConfigError("fit_mse: dataset has no labels");
  data.validate();
  const auto start = Clock::now();
  RunTrace trace;
  AdamState adam({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay},
                 static_cast<Index>(model.parameter_count(selector)));
  std::size_t iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto plan = make_batches(data.size(), cfg.batch_size, true, epoch_seed(cfg.seed, epoch));
    trace.dropped_rows += plan.dropped_rows;
    double loss_sum = 0.0;
    for (const auto& rows : plan.batches) {
      const Matrix x = gather_rows(data.inputs, rows);
      const Vector y = gather_rows(*data.labels, rows);
      auto fwd = model.forward(x, ForwardMode::Train);
      const Vector residual = fwd.predictions - y;
      const double loss = residual.squaredNorm() / double(residual.size());
      trace.iterations.push_back({epoch, iter++, loss, seconds_since(start)});
      if (!std::isfinite(loss)) {
        trace.diverged = true;
        trace.divergence_reason = "non-finite training loss";
        throw DivergenceError("fit_mse: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += loss;
      const Vector d_pred = 2.0 * residual / double(residual.size());
      const auto grads = model.backward(fwd.tape, Matrix(), d_pred);
      Vector params = snapshot_params(model, selector);
      if (adam_step(adam, params, flatten(grads, selector)) == StepStatus::SkippedNonFinite) {
        ++trace.skipped_steps;
        continue;
      }
      restore_params(model, selector, params);
    }
    close_epoch(trace, epoch, loss_sum, plan.batches.size());
  }
  trace.phase_seconds["train"] = seconds_since(start);
  return trace;
}

SourceFit train_source(RegressionModel& model, const TabularDataset& source,
                       const TrainConfig& cfg, std::size_t k) {
  SourceFit fit;
  fit.trace = fit_mse(model, source, cfg, ParamSelector::All);
  const auto start = Clock::now();
  fit.stats = compute_source_statistics(model, source.inputs, k);
  fit.trace.phase_seconds["statistics"] = seconds_since(start);
  return fit;
}

namespace {

// Alignment loss for one feature batch under the configured variant.
class AlignmentObjective {
 public:
  AlignmentObjective(const SourceStatistics& source, const Vector& head_w, const AdaptConfig& cfg,
                     std::size_t& effective_k)
      : cfg_(cfg), source_(source) {
    switch (cfg.variant.space) {
      case AlignmentSpace::Subspace: {
        effective_k = resolve_subspace_k(cfg.k, source.rank);
        sub_ = subspace_from_eigen(source.raw.mean, source.eig, head_w, effective_k);
        break;
      }
      case AlignmentSpace::NaiveTopVariance:
        effective_k = cfg.k;
        sub_ = top_variance_subspace(source.raw, head_w, cfg.k);
        break;
      case AlignmentSpace::FullSpace:
        effective_k = static_cast<std::size_t>(source.raw.dim());
        // Surfaces the degenerate-dimension failure before any update.
        if (cfg.variant.metric == AlignmentMetric::KL)
          naive_alignment_loss(source.raw, source.raw);
        break;
    }
  }

  FeatureLoss<double> operator()(const Matrix& features) const {
    if (cfg_.variant.space == AlignmentSpace::FullSpace)
      return full_space_alignment_loss(features, source_.raw, cfg_.variant.metric);
    return subspace_alignment_loss(features, sub_, cfg_.variant.metric, cfg_.dimension_weighting);
  }

 private:
  const AdaptConfig& cfg_;
  const SourceStatistics& source_;
  SubspaceStats sub_;
};

}  // namespace

TtaResult run_tta(RegressionModel& model, const SourceStatistics& source, const Matrix& target,
                  const AdaptConfig& cfg) {
  if (cfg.batch_size < 2) throw ConfigError("run_tta: batch size must be at least 2");
  if (cfg.epochs < 0) throw ConfigError("run_tta: epochs must be non-negative");
  if (cfg.adapt_forward == ForwardMode::Eval)
    throw ConfigError("run_tta: adaptation needs batch statistics (train or batch_stat)");
  if (source.raw.dim() != model.feature_dim())
    throw DimensionError("run_tta: source statistics do not match the model feature width");

  const auto start = Clock::now();
  TtaResult result;
  const AlignmentObjective objective(source, model.head_w(), cfg, result.effective_k);
  RunTrace& trace = result.trace;

  AdamState adam({cfg.lr, 0.9, 0.999, 1e-8, 0.0},
                 static_cast<Index>(model.parameter_count(cfg.param_selector)));
  const bool online = cfg.mode == AdaptMode::BatchedOnline;
  const int epochs = online ? std::max(cfg.epochs, 1) : cfg.epochs;
  if (online) result.online_predictions = Vector::Constant(target.rows(), std::nan(""));

  std::size_t iter = 0;
  for (int epoch = 0; epoch < epochs && !trace.diverged; ++epoch) {
    const auto plan =
        make_batches(target.rows(), cfg.batch_size, true, epoch_seed(cfg.seed, epoch));
    trace.dropped_rows += plan.dropped_rows;
    double loss_sum = 0.0;
    std::size_t done = 0;
    for (const auto& rows : plan.batches) {
      const Matrix x = gather_rows(target, rows);
      auto fwd = model.forward(x, cfg.adapt_forward);
      if (online && epoch == 0)
        for (std::size_t i = 0; i < rows.size(); ++i)
          (*result.online_predictions)(rows[i]) = fwd.predictions(Index(i));

      FeatureLoss<double> loss;
      try {
        loss = objective(fwd.features);
      } catch (const NumericalError& e) {
        trace.iterations.push_back({epoch, iter++, std::nan(""), seconds_since(start)});
        trace.diverged = true;
        trace.divergence_reason = e.what();
        break;
      }
      trace.iterations.push_back({epoch, iter++, loss.value, seconds_since(start)});
      if (!std::isfinite(loss.value) || !loss.grad.allFinite()) {
        trace.diverged = true;
        trace.divergence_reason = "non-finite alignment loss at iteration " +
                                  std::to_string(iter - 1);
        break;
      }
      loss_sum += loss.value;
      ++done;

      const auto grads = model.backward(fwd.tape, loss.grad, Vector());
      Vector params = snapshot_params(model, cfg.param_selector);
      if (adam_step(adam, params, flatten(grads, cfg.param_selector)) ==
          StepStatus::SkippedNonFinite) {
        ++trace.skipped_steps;
        continue;
      }
      if (!params.allFinite()) {
        trace.diverged = true;
        trace.divergence_reason = "non-finite parameter after update";
        break;
      }
      restore_params(model, cfg.param_selector, params);
    }
    close_epoch(trace, epoch, loss_sum, done);
  }

  if (online) {
    // Rows left out of every batch (a trailing single row) fall back to
    // running statistics.
    auto& preds = *result.online_predictions;
    std::vector<Index> missing;
    for (Index i = 0; i < preds.size(); ++i)
      if (std::isnan(preds(i))) missing.push_back(i);
    if (!missing.empty() && !trace.diverged) {
      const Vector p = model.forward(gather_rows(target, missing), ForwardMode::Eval).predictions;
      for (std::size_t i = 0; i < missing.size(); ++i) preds(missing[i]) = p(Index(i));
    }
  }
  trace.phase_seconds["adapt"] = seconds_since(start);
  return result;
}

void baseline_bn_adapt(RegressionModel& model, const Matrix& target, Index batch_size) {
  for (const auto& chunk : evaluation_chunks(target.rows(), batch_size))
    model.forward(gather_rows(target, chunk), ForwardMode::Train);
}

void baseline_prototype(RegressionModel& model, const std::vector<Matrix>& feature_batches) {
  Vector sum = Vector::Zero(model.feature_dim());
  Index count = 0;
  for (const auto& batch : feature_batches) {
    if (batch.rows() == 0) continue;
    if (batch.cols() != model.feature_dim())
      throw DimensionError("baseline_prototype: feature width mismatch");
    sum += batch.colwise().sum().transpose();
    count += batch.rows();
    model.head_w() = sum / double(count);
  }
}

void baseline_prototype(RegressionModel& model, const Matrix& target, Index batch_size) {
  std::vector<Matrix> batches;
  for (const auto& chunk : evaluation_chunks(target.rows(), batch_size))
    batches.push_back(model.forward(gather_rows(target, chunk), ForwardMode::Eval).features);
  baseline_prototype(model, batches);
}

RunTrace baseline_oracle(RegressionModel& model, const TabularDataset& labeled_target,
                         const TrainConfig& cfg) {
  return fit_mse(model, labeled_target, cfg, ParamSelector::All);
}

const char* to_string(AlignmentMetric metric) {
  switch (metric) {
    case AlignmentMetric::KL:
      return "kl";
    case AlignmentMetric::Wasserstein2:
      return "wasserstein2";
    case AlignmentMetric::L1:
      return "l1";
  }
  return "?";
}

const char* to_string(AlignmentSpace space) {
  switch (space) {
    case AlignmentSpace::Subspace:
      return "subspace";
    case AlignmentSpace::NaiveTopVariance:
      return "top_variance";
    case AlignmentSpace::FullSpace:
      return "full";
  }
  return "?";
}

const char* to_string(AdaptMode mode) {
  return mode == AdaptMode::Offline ? "offline" : "online";
}

AdaptMode parse_adapt_mode(const std::string& name) {
  if (name == "offline") return AdaptMode::Offline;
  if (name == "online" || name == "batched_online") return AdaptMode::BatchedOnline;
  throw ConfigError("unknown adaptation mode '" + name + "'");
}

}  // namespace ssa
