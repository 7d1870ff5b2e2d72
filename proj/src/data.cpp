#include "ssa/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "ssa/errors.hpp"

namespace ssa {

void TabularDataset::validate() const {
  if (labels && labels->size() != inputs.rows())
    throw ConfigError("dataset '" + domain_tag + "': " + std::to_string(labels->size()) +
                      " labels for " + std::to_string(inputs.rows()) + " rows");
  if (!inputs.allFinite()) throw ConfigError("dataset '" + domain_tag + "': non-finite input");
  if (!feature_names.empty() && static_cast<Index>(feature_names.size()) != inputs.cols())
    throw ConfigError("dataset '" + domain_tag + "': feature name count mismatch");
}

Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

Vector gather_rows(const Vector& v, const std::vector<Index>& rows) {
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Index>(i)) = v(rows[i]);
  return out;
}

TabularDataset select_rows(const TabularDataset& ds, const std::vector<Index>& rows) {
  TabularDataset out;
  out.inputs = gather_rows(ds.inputs, rows);
  if (ds.labels) out.labels = gather_rows(*ds.labels, rows);
  out.feature_names = ds.feature_names;
  out.domain_tag = ds.domain_tag;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic covariate shift

double GroundTruth::operator()(const Vector& x) const {
  if (kind == Kind::Linear) {
    if (x.size() != coef.size()) throw DimensionError("ground truth: input width mismatch");
    return coef.dot(x) + bias;
  }
  if (x.size() != hidden_w.cols()) throw DimensionError("ground truth: input width mismatch");
  const Vector h = (hidden_w * x + hidden_b).array().tanh().matrix();
  return out_w.dot(h) + bias;
}

Vector GroundTruth::operator()(const Matrix& xs) const {
  Vector y(xs.rows());
  for (Index i = 0; i < xs.rows(); ++i) y(i) = (*this)(Vector(xs.row(i).transpose()));
  return y;
}

GroundTruth GroundTruth::linear(Vector coef, double bias) {
  GroundTruth t;
  t.kind = Kind::Linear;
  t.coef = std::move(coef);
  t.bias = bias;
  return t;
}

GroundTruth GroundTruth::tanh_net(Index dim, Index hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  GroundTruth t;
  t.kind = Kind::TanhNet;
  t.hidden_w.resize(hidden, dim);
  for (Index r = 0; r < hidden; ++r)
    for (Index c = 0; c < dim; ++c) t.hidden_w(r, c) = normal(rng) / std::sqrt(double(dim));
  t.hidden_b.resize(hidden);
  for (Index r = 0; r < hidden; ++r) t.hidden_b(r) = 0.5 * normal(rng);
  t.out_w.resize(hidden);
  for (Index r = 0; r < hidden; ++r) t.out_w(r) = normal(rng) / std::sqrt(double(hidden));
  t.bias = 0.0;
  return t;
}

namespace {

void check_law(const GaussianLaw& law, Index dim, const char* which) {
  if (law.mean.size() != dim || law.factor.rows() != dim || law.factor.cols() != dim)
    throw ConfigError(std::string("shift spec: ") + which + " law shape mismatch");
  if (!law.mean.allFinite() || !law.factor.allFinite())
    throw ConfigError(std::string("shift spec: ") + which + " law is not finite");
  const Matrix cov = law.factor * law.factor.transpose();
  const auto eig = sym_eig(cov);
  if (numeric_rank(eig.eigenvalues, 1e-12) < static_cast<std::size_t>(dim) ||
      eig.eigenvalues(dim - 1) <= 0.0)
    throw ConfigError(std::string("shift spec: ") + which +
                      " covariance factor is not full rank");
}

Matrix sample_law(const GaussianLaw& law, Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index d = law.mean.size();
  Matrix eps(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) eps(i, j) = normal(rng);
  Matrix x = eps * law.factor.transpose();
  x.rowwise() += law.mean.transpose();
  return x;
}

std::vector<std::string> default_names(Index d) {
  std::vector<std::string> names;
  for (Index j = 0; j < d; ++j) names.push_back("x" + std::to_string(j));
  return names;
}

Matrix random_orthogonal(Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  // Fix column signs so the result does not depend on the QR sign convention.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace

std::pair<TabularDataset, TabularDataset> generate_shift_pair(const ShiftSpec& spec,
                                                              Index n_source, Index n_target,
                                                              std::uint64_t seed) {
  const Index d = spec.dim();
  if (d <= 0) throw ConfigError("shift spec: dimension must be positive");
  if (n_source <= 0 || n_target <= 0) throw ConfigError("shift spec: sizes must be positive");
  if (spec.noise_std < 0) throw ConfigError("shift spec: negative noise");
  check_law(spec.source, d, "source");
  check_law(spec.target, d, "target");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](const GaussianLaw& law, Index n, const char* tag) {
    TabularDataset ds;
    ds.inputs = sample_law(law, n, rng);
    Vector y = spec.truth(ds.inputs);
    if (spec.noise_std > 0)
      for (Index i = 0; i < n; ++i) y(i) += spec.noise_std * normal(rng);
    ds.labels = std::move(y);
    ds.feature_names = default_names(d);
    ds.domain_tag = tag;
    return ds;
  };
  auto source = draw(spec.source, n_source, "source");
  auto target = draw(spec.target, n_target, "target");
  return {std::move(source), std::move(target)};
}

// Each shift lives in a random rotation of the input space. The label depends
// on the first `relevant` latent coordinates only; the remaining nuisance
// coordinates have a small source spread and, in the target, a mean shift of
// norm 2 plus a spread change. p(y | x) is identical in both domains.
std::vector<ShiftSpec> synthetic_shift_suite(std::size_t count, std::uint64_t seed) {
  constexpr Index kDim = 20;
  constexpr Index kRelevant = 8;
  constexpr Index kHidden = 16;
  constexpr double kShiftNorm = 3.0;
  constexpr double kNuisanceStd = 0.1;

  std::vector<ShiftSpec> suite;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(seed * 1000003ULL + i);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const Matrix rot = random_orthogonal(kDim, rng);

    Vector src_scale = Vector::Ones(kDim);
    src_scale.tail(kDim - kRelevant).setConstant(kNuisanceStd);
    Vector tgt_scale = src_scale;
    tgt_scale.tail(kDim - kRelevant) *= 1.0 + uniform(rng);

    Vector shift = Vector::Zero(kDim);
    for (Index j = kRelevant; j < kDim; ++j) shift(j) = normal(rng);
    shift *= kShiftNorm / shift.norm();

    ShiftSpec spec;
    spec.source.mean = Vector::Zero(kDim);
    spec.source.factor = rot * src_scale.asDiagonal();
    spec.target.mean = rot * shift;
    spec.target.factor = rot * tgt_scale.asDiagonal();

    GroundTruth latent = GroundTruth::tanh_net(kRelevant, kHidden, rng());
    // Compose with the rotation: the label only sees the relevant latent block.
    spec.truth = latent;
    spec.truth.hidden_w = latent.hidden_w * rot.transpose().topRows(kRelevant);
    spec.noise_std = 0.05;
    suite.push_back(std::move(spec));
  }
  return suite;
}

namespace {

Vector json_to_vector(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

GaussianLaw law_from_json(const nlohmann::json& j, Index dim) {
  GaussianLaw law;
  law.mean = j.contains("mean") ? json_to_vector(j.at("mean")) : Vector::Zero(dim);
  if (j.contains("factor")) {
    const auto rows = j.at("factor").get<std::vector<std::vector<double>>>();
    law.factor.resize(static_cast<Index>(rows.size()), dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (static_cast<Index>(rows[r].size()) != dim)
        throw ConfigError("shift spec: factor row width mismatch");
      for (Index c = 0; c < dim; ++c) law.factor(static_cast<Index>(r), c) = rows[r][c];
    }
  } else if (j.contains("scale") && j.at("scale").is_array()) {
    law.factor = json_to_vector(j.at("scale")).asDiagonal();
  } else {
    law.factor = Matrix::Identity(dim, dim) * j.value("scale", 1.0);
  }
  return law;
}

}  // namespace

ShiftSpec shift_spec_from_json(const nlohmann::json& j) {
  try {
    if (j.contains("suite_index")) {
      const auto index = j.at("suite_index").get<std::size_t>();
      const auto suite = synthetic_shift_suite(index + 1, j.value("suite_seed", 0ULL));
      return suite.back();
    }
    const Index dim = j.at("dim").get<Index>();
    ShiftSpec spec;
    spec.source = law_from_json(j.value("source", nlohmann::json::object()), dim);
    spec.target = law_from_json(j.value("target", nlohmann::json::object()), dim);
    spec.noise_std = j.value("noise_std", 0.0);
    const auto truth = j.value("truth", nlohmann::json::object());
    const std::string kind = truth.value("kind", "tanh_net");
    if (kind == "linear") {
      spec.truth = GroundTruth::linear(json_to_vector(truth.at("coef")), truth.value("bias", 0.0));
    } else if (kind == "tanh_net") {
      spec.truth = GroundTruth::tanh_net(dim, truth.value("hidden", Index{16}),
                                         truth.value("seed", 0ULL));
    } else {
      throw ConfigError("shift spec: unknown truth kind '" + kind + "'");
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("shift spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV

SplitRule SplitRule::california_default() {
  SplitRule rule;
  rule.kind = Kind::Categorical;
  rule.column = "ocean_proximity";
  rule.source_values = {"INLAND"};
  return rule;
}

namespace {

using CsvRow = std::vector<std::string>;

// RFC-4180 reader: quoted fields may contain commas, quotes ("") and newlines.
std::vector<CsvRow> read_csv_rows(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open CSV " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);

  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool quoted = false;
  bool row_has_content = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      row_has_content = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      row_has_content = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (row_has_content || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      row_has_content = false;
    } else {
      field.push_back(c);
      row_has_content = true;
    }
  }
  if (quoted) throw ConfigError("CSV " + path.string() + ": unterminated quoted field");
  if (row_has_content || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::optional<double> parse_number(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  double value = 0;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(value))
    return std::nullopt;
  return value;
}

std::size_t column_index(const CsvRow& header, const std::string& name,
                         const std::filesystem::path& path) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end())
    throw ConfigError("CSV " + path.string() + ": no column named '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

CsvSplit load_csv(const std::filesystem::path& path, const std::string& label_column,
                  const SplitRule& rule) {
  const auto rows = read_csv_rows(path);
  if (rows.empty()) throw ConfigError("CSV " + path.string() + ": missing header row");
  CsvRow header = rows.front();
  for (auto& h : header) h = trim(h);
  const std::size_t label_idx = column_index(header, label_column, path);
  const std::size_t split_idx = column_index(header, rule.column, path);
  const bool split_is_feature = rule.kind == SplitRule::Kind::Threshold;

  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_idx) continue;
    if (c == split_idx && !split_is_feature) continue;
    feature_cols.push_back(c);
  }

  std::vector<std::vector<double>> src_x, tgt_x;
  std::vector<double> src_y, tgt_y;
  std::size_t dropped = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw ConfigError("CSV " + path.string() + ": row " + std::to_string(r) + " has " +
                        std::to_string(row.size()) + " fields, header has " +
                        std::to_string(header.size()));
    std::vector<double> x;
    bool missing = false;
    for (const auto c : feature_cols) {
      const auto v = parse_number(row[c]);
      if (!v) {
        if (!trim(row[c]).empty())
          throw ConfigError("CSV " + path.string() + ": non-numeric value '" + row[c] +
                            "' in column '" + header[c] + "'");
        missing = true;
        break;
      }
      x.push_back(*v);
    }
    const auto y = parse_number(row[label_idx]);
    const std::string split_value = trim(row[split_idx]);
    if (missing || !y || split_value.empty()) {
      if (!missing && !y && !trim(row[label_idx]).empty())
        throw ConfigError("CSV " + path.string() + ": non-numeric label '" + row[label_idx] + "'");
      ++dropped;
      continue;
    }

    bool is_source = false;
    if (rule.kind == SplitRule::Kind::Categorical) {
      is_source = std::find(rule.source_values.begin(), rule.source_values.end(), split_value) !=
                  rule.source_values.end();
    } else {
      const auto v = parse_number(split_value);
      if (!v) throw ConfigError("CSV: split column '" + rule.column + "' is not numeric");
      is_source = rule.source_below ? (*v < rule.threshold) : (*v >= rule.threshold);
    }
    (is_source ? src_x : tgt_x).push_back(std::move(x));
    (is_source ? src_y : tgt_y).push_back(*y);
  }
  if (dropped > 0)
    std::clog << "load_csv: dropped " << dropped << " row(s) with missing values from "
              << path.string() << '\n';
  if (src_x.empty() || tgt_x.empty())
    throw ConfigError("CSV " + path.string() + ": split rule on '" + rule.column +
                      "' leaves an empty " + (src_x.empty() ? "source" : "target") + " domain");

  std::vector<std::string> names;
  for (const auto c : feature_cols) names.push_back(header[c]);
  auto build = [&](const std::vector<std::vector<double>>& xs, const std::vector<double>& ys,
                   const char* tag) {
    TabularDataset ds;
    ds.inputs.resize(static_cast<Index>(xs.size()), static_cast<Index>(names.size()));
    for (std::size_t i = 0; i < xs.size(); ++i)
      for (std::size_t j = 0; j < names.size(); ++j)
        ds.inputs(static_cast<Index>(i), static_cast<Index>(j)) = xs[i][j];
    ds.labels = Eigen::Map<const Vector>(ys.data(), static_cast<Index>(ys.size()));
    ds.feature_names = names;
    ds.domain_tag = tag;
    return ds;
  };
  return {build(src_x, src_y, "source"), build(tgt_x, tgt_y, "target"), dropped};
}

void write_csv(const TabularDataset& ds, const std::filesystem::path& path,
               const std::string& label_column) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write CSV " + path.string());
  std::vector<std::string> names = ds.feature_names;
  if (names.empty()) names = default_names(ds.width());
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  if (ds.labels) out << (names.empty() ? "" : ",") << label_column;
  out << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    for (Index j = 0; j < ds.width(); ++j) out << (j ? "," : "") << format_double(ds.inputs(i, j));
    if (ds.labels) out << (ds.width() ? "," : "") << format_double((*ds.labels)(i));
    out << '\n';
  }
  if (!out) throw IoError("failed writing CSV " + path.string());
}

TabularDataset read_numeric_csv(const std::filesystem::path& path,
                                const std::string& label_column) {
  const auto rows = read_csv_rows(path);
  if (rows.empty()) throw ConfigError("CSV " + path.string() + ": missing header row");
  CsvRow header = rows.front();
  for (auto& h : header) h = trim(h);
  std::optional<std::size_t> label_idx;
  if (!label_column.empty()) {
    const auto it = std::find(header.begin(), header.end(), label_column);
    if (it != header.end()) label_idx = static_cast<std::size_t>(it - header.begin());
  }
  TabularDataset ds;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != label_idx) ds.feature_names.push_back(header[c]);
  const auto n = static_cast<Index>(rows.size() - 1);
  ds.inputs.resize(n, static_cast<Index>(ds.feature_names.size()));
  Vector labels(label_idx ? n : 0);
  for (Index i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i) + 1];
    if (row.size() != header.size())
      throw ConfigError("CSV " + path.string() + ": ragged row " + std::to_string(i + 1));
    Index j = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const auto v = parse_number(row[c]);
      if (!v)
        throw ConfigError("CSV " + path.string() + ": non-numeric value in column '" +
                          header[c] + "'");
      if (c == label_idx)
        labels(i) = *v;
      else
        ds.inputs(i, j++) = *v;
    }
  }
  if (label_idx) ds.labels = std::move(labels);
  ds.domain_tag = path.stem().string();
  return ds;
}

// ---------------------------------------------------------------------------
// Standardization

Standardizer fit_standardizer(const TabularDataset& source) {
  if (source.size() < 2) throw ConfigError("standardizer: need at least 2 source rows");
  const double n = static_cast<double>(source.size());
  const Vector mean = source.inputs.colwise().sum().transpose() / n;
  const Vector var =
      (source.inputs.rowwise() - mean.transpose()).array().square().colwise().sum().transpose() / n;

  Standardizer s;
  std::vector<double> means, stds;
  for (Index j = 0; j < source.width(); ++j) {
    if (var(j) > 0.0) {
      s.retained.push_back(j);
      means.push_back(mean(j));
      stds.push_back(std::sqrt(var(j)));
    } else {
      const std::string name = j < static_cast<Index>(source.feature_names.size())
                                   ? source.feature_names[static_cast<std::size_t>(j)]
                                   : "column " + std::to_string(j);
      s.dropped.push_back(name);
      std::clog << "standardizer: dropping constant feature '" << name << "'\n";
    }
  }
  if (s.retained.empty()) throw ConfigError("standardizer: every feature has zero variance");
  s.mean = Eigen::Map<const Vector>(means.data(), static_cast<Index>(means.size()));
  s.std = Eigen::Map<const Vector>(stds.data(), static_cast<Index>(stds.size()));

  if (source.labels) {
    const double ly = source.labels->mean();
    const double lv = (source.labels->array() - ly).square().mean();
    if (lv > 0.0) {
      s.label_mean = ly;
      s.label_std = std::sqrt(lv);
    }
  }
  return s;
}

TabularDataset apply(const Standardizer& standardizer, const TabularDataset& ds) {
  const Index max_col = *std::max_element(standardizer.retained.begin(), standardizer.retained.end());
  if (max_col >= ds.width())
    throw DimensionError("standardizer: dataset has " + std::to_string(ds.width()) +
                         " columns, fitted on more");
  TabularDataset out;
  out.domain_tag = ds.domain_tag;
  const auto k = static_cast<Index>(standardizer.retained.size());
  out.inputs.resize(ds.size(), k);
  for (Index j = 0; j < k; ++j) {
    const Index src = standardizer.retained[static_cast<std::size_t>(j)];
    out.inputs.col(j) =
        ((ds.inputs.col(src).array() - standardizer.mean(j)) / standardizer.std(j)).matrix();
    if (src < static_cast<Index>(ds.feature_names.size()))
      out.feature_names.push_back(ds.feature_names[static_cast<std::size_t>(src)]);
  }
  if (ds.labels) {
    if (standardizer.label_mean && standardizer.label_std)
      out.labels = ((ds.labels->array() - *standardizer.label_mean) / *standardizer.label_std)
                       .matrix();
    else
      out.labels = ds.labels;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

BatchPlan make_batches(Index n, Index batch_size, bool shuffle, std::uint64_t seed) {
  if (batch_size < 2) throw ConfigError("batches: batch size must be at least 2");
  std::vector<Index> order(static_cast<std::size_t>(std::max<Index>(n, 0)));
  std::iota(order.begin(), order.end(), Index{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
  }
  BatchPlan plan;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    if (end - start < 2) {
      plan.dropped_rows += end - start;
      continue;
    }
    plan.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return plan;
}

std::vector<std::vector<Index>> evaluation_chunks(Index n, Index batch_size) {
  if (batch_size < 2) throw ConfigError("evaluation_chunks: batch size must be at least 2");
  std::vector<std::vector<Index>> chunks;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    std::vector<Index> chunk(static_cast<std::size_t>(end - start));
    std::iota(chunk.begin(), chunk.end(), start);
    if (chunk.size() < 2 && !chunks.empty())
      chunks.back().insert(chunks.back().end(), chunk.begin(), chunk.end());
    else
      chunks.push_back(std::move(chunk));
  }
  return chunks;
}

}  // namespace ssa
