#include "ssa/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ssa/errors.hpp"

namespace ssa {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Reads key from obj with a default, converting type errors to ConfigError,
// and writes the value back so `obj` ends up fully resolved.
template <typename T>
T take(json& obj, const char* key, const T& fallback, const std::string& where) {
  try {
    if (!obj.contains(key)) obj[key] = fallback;
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (const auto& item : obj.items()) {
    if (std::none_of(known.begin(), known.end(),
                     [&](const char* k) { return item.key() == k; }))
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

json object_at(json& tree, const char* key) {
  if (!tree.contains(key)) return json::object();
  if (!tree.at(key).is_object()) throw ConfigError(std::string(key) + " must be an object");
  return tree.at(key);
}

AlignmentSpace parse_space(const std::string& s) {
  if (s == "subspace") return AlignmentSpace::Subspace;
  if (s == "top_variance") return AlignmentSpace::NaiveTopVariance;
  if (s == "full") return AlignmentSpace::FullSpace;
  throw ConfigError("unknown alignment space '" + s + "' (subspace, top_variance, full)");
}

AlignmentMetric parse_metric(const std::string& s) {
  if (s == "kl") return AlignmentMetric::KL;
  if (s == "wasserstein2") return AlignmentMetric::Wasserstein2;
  if (s == "l1") return AlignmentMetric::L1;
  throw ConfigError("unknown alignment metric '" + s + "' (kl, wasserstein2, l1)");
}

SplitRule parse_split(json& j) {
  const std::string where = "dataset.split";
  reject_unknown(j, {"kind", "column", "source_values", "threshold", "source_below"}, where);
  SplitRule rule = SplitRule::california_default();
  const auto kind = take<std::string>(j, "kind", "categorical", where);
  rule.column = take<std::string>(j, "column", rule.column, where);
  if (kind == "categorical") {
    rule.kind = SplitRule::Kind::Categorical;
    rule.source_values = take<std::vector<std::string>>(j, "source_values", rule.source_values, where);
  } else if (kind == "threshold") {
    rule.kind = SplitRule::Kind::Threshold;
    if (!j.contains("threshold")) throw ConfigError(where + ": threshold rule needs 'threshold'");
    rule.threshold = take<double>(j, "threshold", 0.0, where);
    rule.source_below = take<bool>(j, "source_below", true, where);
  } else {
    throw ConfigError(where + ": unknown kind '" + kind + "' (categorical, threshold)");
  }
  return rule;
}

DatasetConfig parse_dataset(json& j, const std::filesystem::path& base_dir) {
  const std::string where = "dataset";
  DatasetConfig d;
  const auto kind = take<std::string>(j, "kind", "synthetic", where);
  d.validation_fraction = take<double>(j, "validation_fraction", 0.1, where);
  d.standardize = take<bool>(j, "standardize", true, where);
  if (!(d.validation_fraction > 0.0 && d.validation_fraction < 1.0))
    throw ConfigError("dataset.validation_fraction must lie in (0, 1)");
  if (kind == "synthetic") {
    reject_unknown(j, {"kind", "shift", "n_source", "n_target", "seed", "validation_fraction",
                       "standardize"}, where);
    d.kind = DatasetConfig::Kind::Synthetic;
    if (!j.contains("shift")) j["shift"] = {{"suite_index", 0}, {"suite_seed", 0}};
    d.shift = shift_spec_from_json(j.at("shift"));
    d.n_source = take<Index>(j, "n_source", 2000, where);
    d.n_target = take<Index>(j, "n_target", 2000, where);
    d.seed = take<std::uint64_t>(j, "seed", 0, where);
    if (d.n_source < 20 || d.n_target < 2)
      throw ConfigError("dataset: need n_source >= 20 and n_target >= 2");
  } else if (kind == "csv") {
    reject_unknown(j, {"kind", "path", "label_column", "split", "validation_fraction",
                       "standardize"}, where);
    d.kind = DatasetConfig::Kind::Csv;
    if (!j.contains("path")) throw ConfigError("dataset.path is required for csv data");
    d.csv_path = take<std::string>(j, "path", "", where);
    if (d.csv_path.is_relative() && !base_dir.empty()) d.csv_path = base_dir / d.csv_path;
    if (!std::filesystem::exists(d.csv_path))
      throw ConfigError("dataset.path: " + d.csv_path.string() + " does not exist");
    d.label_column = take<std::string>(j, "label_column", "median_house_value", where);
    if (!j.contains("split")) j["split"] = json::object();
    d.split = parse_split(j.at("split"));
  } else {
    throw ConfigError("dataset.kind: unknown '" + kind + "' (synthetic, csv)");
  }
  return d;
}

TrainConfig parse_train(json& j, const std::string& where, const TrainConfig& defaults) {
  reject_unknown(j, {"epochs", "lr", "batch_size", "seed", "weight_decay"}, where);
  TrainConfig t;
  t.epochs = take<int>(j, "epochs", defaults.epochs, where);
  t.lr = take<double>(j, "lr", defaults.lr, where);
  t.batch_size = take<Index>(j, "batch_size", defaults.batch_size, where);
  t.seed = take<std::uint64_t>(j, "seed", defaults.seed, where);
  t.weight_decay = take<double>(j, "weight_decay", defaults.weight_decay, where);
  if (t.epochs < 0 || !(t.lr > 0.0) || t.batch_size < 2)
    throw ConfigError(where + ": need epochs >= 0, lr > 0 and batch_size >= 2");
  return t;
}

// Resolves one entry of the methods list against the adaptation defaults.
MethodSpec parse_method(const json& entry, const json& adaptation_defaults, std::size_t index) {
  json m = entry.is_string() ? json{{"name", entry}} : entry;
  if (!m.is_object() || !m.contains("name"))
    throw ConfigError("methods[" + std::to_string(index) + "]: needs a name");
  const auto name = m.at("name").get<std::string>();
  const std::string where = "methods[" + std::to_string(index) + "] (" + name + ")";

  MethodSpec spec;
  spec.label = take<std::string>(m, "label", name, where);

  if (name == "source" || name == "bn_adapt" || name == "prototype") {
    const bool bn_adapt = name == "bn_adapt";
    if (bn_adapt)
      reject_unknown(m, {"name", "label", "batch_size", "eval_mode"}, where);
    else
      reject_unknown(m, {"name", "label", "batch_size"}, where);
    spec.kind = name == "source" ? MethodKind::Source
                : bn_adapt       ? MethodKind::BnAdapt
                                 : MethodKind::Prototype;
    spec.adapt.batch_size = take<Index>(m, "batch_size", 64, where);
    // BN-adapt predicts the way train-mode inference does: with the
    // statistics of each test batch. "eval" scores the refreshed running
    // statistics instead.
    spec.eval_mode = parse_forward_mode(
        take<std::string>(m, "eval_mode", bn_adapt ? "batch_stat" : "eval", where));
    if (!bn_adapt && spec.eval_mode != ForwardMode::Eval)
      throw ConfigError(where + ": evaluates with running statistics only");
  } else if (name == "oracle") {
    json train = m;
    train.erase("name");
    train.erase("label");
    spec.kind = MethodKind::Oracle;
    spec.oracle = parse_train(train, where, TrainConfig{10, 1e-3, 64, 0, 0.0});
    for (const auto& item : train.items()) m[item.key()] = item.value();
    m["eval_mode"] = "eval";
  } else if (name == "ssa" || name == "ssa_2wd" || name == "ssa_l1" || name == "naive") {
    reject_unknown(m, {"name", "label", "k", "lr", "batch_size", "epochs", "mode", "eval_mode",
                       "forward", "params", "weighting", "space", "metric"}, where);
    spec.kind = MethodKind::Alignment;
    for (const auto& item : adaptation_defaults.items())
      if (!m.contains(item.key())) m[item.key()] = item.value();
    const char* metric = name == "ssa_2wd" ? "wasserstein2" : name == "ssa_l1" ? "l1" : "kl";
    const bool naive = name == "naive";
    auto& a = spec.adapt;
    a.k = take<std::size_t>(m, "k", 100, where);
    a.lr = take<double>(m, "lr", 1e-3, where);
    a.batch_size = take<Index>(m, "batch_size", 64, where);
    a.epochs = take<int>(m, "epochs", 1, where);
    a.mode = parse_adapt_mode(take<std::string>(m, "mode", "offline", where));
    a.adapt_forward = parse_forward_mode(take<std::string>(m, "forward", "batch_stat", where));
    a.param_selector = parse_param_selector(take<std::string>(m, "params", "norm_affine", where));
    a.dimension_weighting = take<bool>(m, "weighting", !naive, where);
    a.variant.space = parse_space(take<std::string>(m, "space", naive ? "full" : "subspace", where));
    a.variant.metric = parse_metric(take<std::string>(m, "metric", metric, where));
    spec.eval_mode = parse_forward_mode(take<std::string>(m, "eval_mode", "batch_stat", where));
    if (a.k == 0 || !(a.lr > 0.0) || a.batch_size < 2 || a.epochs < 0)
      throw ConfigError(where + ": need k >= 1, lr > 0, batch_size >= 2, epochs >= 0");
    if (a.adapt_forward == ForwardMode::Eval)
      throw ConfigError(where + ": forward must be train or batch_stat");
  } else {
    throw ConfigError(where + ": unknown method (source, ssa, bn_adapt, prototype, oracle, "
                              "naive, ssa_2wd, ssa_l1)");
  }
  if (spec.adapt.batch_size < 2) throw ConfigError(where + ": batch_size must be >= 2");
  spec.resolved = m;
  return spec;
}

}  // namespace

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }

  json* node = &tree;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const bool last = i + 1 == parts.size();
    const auto& key = parts[i];
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError("override '" + assignment + "': '" + key + "' is not an array index");
      }
      if (idx >= node->size())
        throw ConfigError("override '" + assignment + "': index " + key + " out of range");
      json& elem = (*node)[idx];
      // Methods may be given as bare names; promote them so fields can be set.
      if (!last && elem.is_string()) elem = json{{"name", elem}};
      node = &elem;
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object())
        throw ConfigError("override '" + assignment + "': '" + key + "' is inside a scalar");
      node = &(*node)[key];
    }
    if (last) *node = value;
  }
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + part + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds: empty list");
  return seeds;
}

ExperimentConfig parse_experiment_config(const json& tree, const std::filesystem::path& base_dir) {
  if (!tree.is_object()) throw ConfigError("config root must be an object");
  reject_unknown(tree, {"dataset", "model", "source_training", "statistics", "adaptation",
                        "methods", "seeds", "output_dir"}, "config");
  ExperimentConfig cfg;
  json root = tree;

  json dataset = object_at(root, "dataset");
  cfg.dataset = parse_dataset(dataset, base_dir);
  root["dataset"] = dataset;

  json model = object_at(root, "model");
  reject_unknown(model, {"hidden", "seed"}, "model");
  cfg.hidden = take<std::vector<Index>>(model, "hidden", {100, 100, 100, 100}, "model");
  cfg.model_seed = take<std::uint64_t>(model, "seed", 0, "model");
  if (std::any_of(cfg.hidden.begin(), cfg.hidden.end(), [](Index w) { return w < 1; }))
    throw ConfigError("model.hidden widths must be positive");
  root["model"] = model;

  json training = object_at(root, "source_training");
  cfg.source_training = parse_train(training, "source_training", TrainConfig{});
  root["source_training"] = training;

  json statistics = object_at(root, "statistics");
  reject_unknown(statistics, {"k"}, "statistics");
  cfg.statistics_k = take<std::size_t>(statistics, "k", 100, "statistics");
  if (cfg.statistics_k == 0) throw ConfigError("statistics.k must be >= 1");
  root["statistics"] = statistics;

  const json adaptation = object_at(root, "adaptation");
  reject_unknown(adaptation, {"k", "lr", "batch_size", "epochs", "mode", "eval_mode", "forward",
                              "params", "weighting"}, "adaptation");

  if (!root.contains("methods")) root["methods"] = json::array({"source", "ssa"});
  if (!root.at("methods").is_array() || root.at("methods").empty())
    throw ConfigError("methods must be a non-empty list");
  json resolved_methods = json::array();
  for (std::size_t i = 0; i < root.at("methods").size(); ++i) {
    cfg.methods.push_back(parse_method(root.at("methods")[i], adaptation, i));
    resolved_methods.push_back(cfg.methods.back().resolved);
  }
  root["methods"] = resolved_methods;
  for (std::size_t i = 0; i < cfg.methods.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (cfg.methods[i].label == cfg.methods[j].label)
        throw ConfigError("methods: duplicate label '" + cfg.methods[i].label +
                          "' (set a distinct \"label\")");

  cfg.seeds = take<std::vector<std::uint64_t>>(root, "seeds", {0}, "config");
  if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
  cfg.output_dir = take<std::string>(root, "output_dir", "results", "config");
  if (cfg.output_dir.is_relative() && !base_dir.empty()) cfg.output_dir = base_dir / cfg.output_dir;
  root["output_dir"] = cfg.output_dir.string();
  cfg.resolved = root;
  return cfg;
}

std::string describe_plan(const ExperimentConfig& cfg) {
  std::ostringstream out;
  const auto& d = cfg.dataset;
  out << "dataset: ";
  if (d.kind == DatasetConfig::Kind::Synthetic) {
    out << "synthetic, dim " << d.shift.dim() << ", " << d.n_source << " source / " << d.n_target
        << " target rows, seed " << d.seed << '\n';
  } else {
    out << "csv " << d.csv_path.string() << ", label '" << d.label_column << "', split on '"
        << d.split.column << "'\n";
  }
  out << "validation fraction: " << d.validation_fraction
      << (d.standardize ? ", standardized with source statistics\n" : "\n");
  out << "model: hidden [";
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) out << (i ? ", " : "") << cfg.hidden[i];
  out << "], seed " << cfg.model_seed << '\n';
  const auto& t = cfg.source_training;
  out << "source training: " << t.epochs << " epochs, lr " << t.lr << ", batch " << t.batch_size
      << ", seed " << t.seed << '\n';
  out << "statistics: K = " << cfg.statistics_k << " (lowered to the feature rank if larger)\n";
  out << "seeds:";
  for (auto s : cfg.seeds) out << ' ' << s;
  out << "\nmethods:\n";
  for (const auto& m : cfg.methods) out << "  " << m.label << ' ' << m.resolved.dump() << '\n';
  out << "output: " << cfg.output_dir.string()
      << " (checkpoint.json, subspace.json, report.json, report.csv, summary.csv, trace.jsonl, "
         "scatter.csv, source.csv, target.csv)\n";
  return out.str();
}

PreparedData prepare_data(const DatasetConfig& cfg) {
  TabularDataset source, target;
  PreparedData out;
  if (cfg.kind == DatasetConfig::Kind::Synthetic) {
    std::tie(source, target) = generate_shift_pair(cfg.shift, cfg.n_source, cfg.n_target, cfg.seed);
  } else {
    auto split = load_csv(cfg.csv_path, cfg.label_column, cfg.split);
    source = std::move(split.source);
    target = std::move(split.target);
    out.dropped_rows = split.dropped_rows;
  }
  if (cfg.standardize) {
    const auto standardizer = fit_standardizer(source);
    out.dropped_features = standardizer.dropped;
    source = apply(standardizer, source);
    target = apply(standardizer, target);
  }

  // Seeded split so a CSV sorted by some column still yields a fair holdout.
  const auto plan = make_batches(source.size(), source.size(), true, cfg.seed ^ 0x5eedULL);
  const auto& order = plan.batches.front();
  const auto n_val = std::max<Index>(
      2, static_cast<Index>(std::llround(cfg.validation_fraction * double(source.size()))));
  if (n_val + 2 > source.size()) throw ConfigError("source split too small for validation");
  std::vector<Index> val(order.begin(), order.begin() + n_val);
  std::vector<Index> train(order.begin() + n_val, order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  out.source_train = select_rows(source, train);
  out.source_val = select_rows(source, val);
  out.target = std::move(target);
  out.source_train.domain_tag = "source";
  out.source_val.domain_tag = "source";
  out.target.domain_tag = "target";
  return out;
}

namespace {

json subspace_json(const SourceStatistics& s) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json basis = json::array();
  for (Index r = 0; r < s.subspace.basis.rows(); ++r) basis.push_back(vec(s.subspace.basis.row(r)));
  return {{"k", s.subspace.k()},
          {"rank", s.rank},
          {"valid_dims", s.valid_dims},
          {"mean", vec(s.raw.mean)},
          {"variance", vec(s.raw.var)},
          {"eigenvalues", vec(s.eig.eigenvalues)},
          {"basis", basis},
          {"weights", vec(s.subspace.weights)},
          {"head_w", vec(s.subspace.head_w)}};
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::optional<double> eigen_weight_correlation(const SubspaceStats& sub) {
  if (sub.k() < 2) return std::nullopt;
  try {
    return pearson_correlation(Vector(sub.eigenvalues), Vector(sub.weights));
  } catch (const UndefinedStatisticError&) {
    return std::nullopt;
  }
}

// Mean over up to 100 target rows of the reconstruction error for n = 0..K.
std::vector<double> mean_reconstruction_curve(const Matrix& target_features,
                                              const SubspaceStats& sub) {
  const Index rows = std::min<Index>(100, target_features.rows());
  std::vector<double> curve(static_cast<std::size_t>(sub.k()) + 1, 0.0);
  for (Index i = 0; i < rows; ++i) {
    const auto c = reconstruction_curve(Vector(target_features.row(i).transpose()), sub);
    for (std::size_t n = 0; n < curve.size(); ++n) curve[n] += c[n] / double(rows);
  }
  return curve;
}

struct MethodOutcome {
  ExperimentRecord record;
  std::optional<RunTrace> trace;
};

MethodOutcome run_method(const MethodSpec& spec, std::uint64_t seed, const RegressionModel& source,
                         const SourceStatistics& stats, const PreparedData& data) {
  MethodOutcome out;
  auto& rec = out.record;
  rec.method = spec.label;
  rec.seed = seed;
  rec.diagnostics.valid_dims = stats.valid_dims;
  rec.diagnostics.subspace_rank = stats.rank;

  RegressionModel model = source;  // every method starts from the same checkpoint
  std::optional<Vector> target_predictions;
  const auto start = Clock::now();
  switch (spec.kind) {
    case MethodKind::Source:
      break;
    case MethodKind::BnAdapt:
      baseline_bn_adapt(model, data.target.inputs, spec.adapt.batch_size);
      break;
    case MethodKind::Prototype:
      baseline_prototype(model, data.target.inputs, spec.adapt.batch_size);
      break;
    case MethodKind::Oracle: {
      auto cfg = spec.oracle;
      cfg.seed = seed;
      out.trace = baseline_oracle(model, data.target, cfg);
      break;
    }
    case MethodKind::Alignment: {
      auto cfg = spec.adapt;
      cfg.seed = seed;
      try {
        auto result = run_tta(model, stats, data.target.inputs, cfg);
        rec.diagnostics.subspace_k = result.effective_k;
        target_predictions = std::move(result.online_predictions);
        out.trace = std::move(result.trace);
      } catch (const DegenerateDimensionError& e) {
        rec.status = "diverged";
        rec.message = e.what();
        return out;
      }
      if (out.trace->diverged) {
        rec.status = "diverged";
        rec.message = out.trace->divergence_reason;
        return out;
      }
      if (cfg.param_selector == ParamSelector::NormAffineOnly && cfg.adapt_forward != ForwardMode::Train &&
          !same_non_affine_state(source, model))
        throw std::logic_error("alignment touched parameters outside gamma/beta");
      break;
    }
  }
  rec.timing["adapt"] = seconds_since(start);

  const auto eval_start = Clock::now();
  const Index bs = spec.adapt.batch_size;
  if (!target_predictions) target_predictions = predict(model, data.target.inputs, spec.eval_mode, bs);
  rec.metrics["source"] = evaluate(predict(model, data.source_val.inputs, spec.eval_mode, bs),
                                   *data.source_val.labels);
  rec.metrics["target"] = evaluate(*target_predictions, *data.target.labels);
  rec.timing["evaluate"] = seconds_since(eval_start);

  if (spec.kind == MethodKind::Alignment || spec.kind == MethodKind::Source) {
    const auto& sub = stats.subspace;
    const Matrix z = extract_features(model, data.target.inputs, spec.eval_mode, bs);
    if (!rec.diagnostics.subspace_k) rec.diagnostics.subspace_k = static_cast<std::size_t>(sub.k());
    rec.diagnostics.eigen_weight_correlation = eigen_weight_correlation(sub);
    rec.diagnostics.reconstruction_curve = mean_reconstruction_curve(z, sub);
    try {
      for (const auto& m : normality_diagnostic(project(z, sub))) {
        rec.diagnostics.skewness.push_back(m.skewness);
        rec.diagnostics.excess_kurtosis.push_back(m.excess_kurtosis);
      }
    } catch (const Error&) {
      // Too few rows or a collapsed direction: leave the moments empty.
    }
  }
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_files) {
  const auto start = Clock::now();
  const PreparedData data = prepare_data(cfg.dataset);
  if (!data.target.labels) throw ConfigError("target labels are required for evaluation");

  ExperimentResult result;
  Architecture arch{data.source_train.width(), cfg.hidden};
  result.source_model = RegressionModel::create(arch, cfg.model_seed);
  auto fit = train_source(result.source_model, data.source_train, cfg.source_training,
                          cfg.statistics_k);
  result.source_stats = fit.stats;
  const double prepare_seconds = seconds_since(start);

  const auto& dir = cfg.output_dir;
  if (write_files) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    result.source_model.save(dir / "checkpoint.json");
    write_json_file(dir / "subspace.json", subspace_json(fit.stats));
    write_csv(data.source_train, dir / "source.csv");
    write_csv(data.target, dir / "target.csv");
    std::ofstream(dir / "trace.jsonl", std::ios::trunc);
    write_trace_jsonl(fit.trace, dir / "trace.jsonl", {{"method", "source_training"}});
    if (fit.stats.subspace.k() >= 2) {
      export_pca_scatter(extract_features(result.source_model, data.source_val.inputs),
                         extract_features(result.source_model, data.target.inputs),
                         fit.stats.subspace, dir / "scatter.csv");
    }
  }

  json experiment = cfg.resolved;
  experiment.erase("methods");
  experiment.erase("seeds");
  experiment.erase("output_dir");
  for (const auto seed : cfg.seeds) {
    for (const auto& spec : cfg.methods) {
      auto outcome = run_method(spec, seed, result.source_model, result.source_stats, data);
      auto& rec = outcome.record;
      rec.config = spec.resolved;
      rec.config_hash = config_hash({{"experiment", experiment}, {"method", spec.resolved},
                                     {"seed", seed}});
      rec.timing["prepare_and_source_training"] = prepare_seconds;
      if (rec.status == "diverged") {
        result.any_diverged = true;
        std::clog << "warning: " << spec.label << " (seed " << seed << ") diverged: " << rec.message
                  << '\n';
      }
      if (write_files && outcome.trace)
        write_trace_jsonl(*outcome.trace, dir / "trace.jsonl",
                          {{"method", spec.label}, {"seed", seed}});
      result.records.push_back(std::move(rec));
    }
  }
  if (write_files) write_report(result.records, dir);
  return result;
}

Inspection inspect_model(const RegressionModel& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_dim())
    throw ConfigError("dataset has " + std::to_string(inputs.cols()) +
                      " feature columns but the checkpoint expects " +
                      std::to_string(model.input_dim()));
  Inspection out;
  const Matrix z = extract_features(model, inputs, ForwardMode::Eval);
  const auto stats = feature_stats(z);
  out.feature_dim = static_cast<std::size_t>(z.cols());
  out.valid_dims = count_valid_dims(stats);
  const auto eig = sym_eig(covariance(z, stats.mean));
  out.spectrum.assign(eig.eigenvalues.data(), eig.eigenvalues.data() + eig.eigenvalues.size());
  out.rank = numeric_rank(eig.eigenvalues, kDefaultRankTol);
  if (out.rank > 0) {
    const auto sub = subspace_from_eigen(stats.mean, eig, model.head_w(),
                                         std::min<std::size_t>(100, out.rank));
    out.eigen_weight_correlation = eigen_weight_correlation(sub);
    const Vector s = sensitivity(sub);
    out.sensitivity.assign(s.data(), s.data() + s.size());
  }
  return out;
}

void print_inspection(const Inspection& ins, std::ostream& out) {
  out << "feature dimensions: " << ins.feature_dim << '\n';
  out << "valid dimensions:   " << ins.valid_dims << '\n';
  out << "subspace rank:      " << ins.rank << '\n';
  out << "top eigenvalues:   ";
  const std::size_t shown = std::min<std::size_t>(10, ins.spectrum.size());
  for (std::size_t i = 0; i < shown; ++i) out << ' ' << std::setprecision(6) << ins.spectrum[i];
  out << '\n';
  out << "eigenvalue/weight correlation: ";
  if (ins.eigen_weight_correlation)
    out << std::setprecision(6) << *ins.eigen_weight_correlation << '\n';
  else
    out << "undefined\n";
  if (ins.sensitivity.empty()) {
    out << "sensitivity: none (no subspace)\n";
    return;
  }
  const auto [lo, hi] = std::minmax_element(ins.sensitivity.begin(), ins.sensitivity.end());
  double sum = 0.0;
  for (double s : ins.sensitivity) sum += s;
  out << "sensitivity: min " << *lo << ", mean " << sum / double(ins.sensitivity.size())
      << ", max " << *hi << " (dimension " << (hi - ins.sensitivity.begin()) << ")\n";
}

}  // namespace ssa
