#include "ssa/report.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "ssa/errors.hpp"

namespace ssa {

namespace {

void check_pair(const Vector& pred, const Vector& truth, Index min_len, const char* who) {
  if (pred.size() != truth.size())
    throw DimensionError(std::string(who) + ": prediction and truth lengths differ");
  if (truth.size() < min_len)
    throw DimensionError(std::string(who) + ": needs at least " + std::to_string(min_len) +
                         " samples");
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json();
}

double number_or_nan(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
  if (!v) return nullptr;
  if constexpr (std::is_floating_point_v<T>) return number_or_null(*v);
  return *v;
}

nlohmann::json doubles_json(const std::vector<double>& values) {
  auto arr = nlohmann::json::array();
  for (double v : values) arr.push_back(number_or_null(v));
  return arr;
}

std::vector<double> doubles_from(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& v : j) out.push_back(number_or_nan(v));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

double r2(const Vector& pred, const Vector& truth) {
  check_pair(pred, truth, 2, "r2");
  const double ss_tot = (truth.array() - truth.mean()).square().sum();
  if (!(ss_tot > 0.0)) throw UndefinedStatisticError("r2: truth is constant");
  return 1.0 - (pred - truth).squaredNorm() / ss_tot;
}

double rmse(const Vector& pred, const Vector& truth) {
  check_pair(pred, truth, 1, "rmse");
  return std::sqrt((pred - truth).squaredNorm() / double(truth.size()));
}

double mae(const Vector& pred, const Vector& truth) {
  check_pair(pred, truth, 1, "mae");
  return (pred - truth).cwiseAbs().sum() / double(truth.size());
}

MetricsRecord evaluate(const Vector& pred, const Vector& truth) {
  MetricsRecord m;
  m.n = static_cast<std::size_t>(truth.size());
  m.rmse = rmse(pred, truth);
  m.mae = mae(pred, truth);
  try {
    m.r2 = r2(pred, truth);
  } catch (const UndefinedStatisticError&) {
    m.r2 = kNaN;
  } catch (const DimensionError&) {
    m.r2 = kNaN;
  }
  return m;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, value);
    if (std::strtod(buf, nullptr) == value) break;
  }
  return buf;
}

nlohmann::json to_json(const ExperimentRecord& r) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [domain, m] : r.metrics)
    metrics[domain] = {{"r2", number_or_null(m.r2)},
                       {"rmse", number_or_null(m.rmse)},
                       {"mae", number_or_null(m.mae)},
                       {"n", m.n}};
  const auto& d = r.diagnostics;
  nlohmann::json diag = {{"valid_dims", optional_json(d.valid_dims)},
                         {"subspace_rank", optional_json(d.subspace_rank)},
                         {"subspace_k", optional_json(d.subspace_k)},
                         {"eigen_weight_correlation", optional_json(d.eigen_weight_correlation)},
                         {"reconstruction_curve", doubles_json(d.reconstruction_curve)},
                         {"skewness", doubles_json(d.skewness)},
                         {"excess_kurtosis", doubles_json(d.excess_kurtosis)}};
  nlohmann::json timing = nlohmann::json::object();
  for (const auto& [k, v] : r.timing) timing[k] = number_or_null(v);
  return {{"method", r.method},       {"seed", r.seed},          {"status", r.status},
          {"message", r.message},     {"config_hash", r.config_hash},
          {"config", r.config},       {"metrics", metrics},      {"diagnostics", diag},
          {"timing", timing}};
}

ExperimentRecord record_from_json(const nlohmann::json& j) {
  try {
    ExperimentRecord r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.status = j.at("status").get<std::string>();
    r.message = j.value("message", "");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.value("config", nlohmann::json::object());
    for (const auto& [domain, m] : j.at("metrics").items())
      r.metrics[domain] = {number_or_nan(m.at("r2")), number_or_nan(m.at("rmse")),
                           number_or_nan(m.at("mae")), m.at("n").get<std::size_t>()};
    const auto& d = j.at("diagnostics");
    auto opt_size = [&](const char* key) -> std::optional<std::size_t> {
      if (!d.contains(key) || d.at(key).is_null()) return std::nullopt;
      return d.at(key).get<std::size_t>();
    };
    r.diagnostics.valid_dims = opt_size("valid_dims");
    r.diagnostics.subspace_rank = opt_size("subspace_rank");
    r.diagnostics.subspace_k = opt_size("subspace_k");
    if (d.contains("eigen_weight_correlation") && !d.at("eigen_weight_correlation").is_null())
      r.diagnostics.eigen_weight_correlation = d.at("eigen_weight_correlation").get<double>();
    r.diagnostics.reconstruction_curve = doubles_from(d.value("reconstruction_curve", nlohmann::json::array()));
    r.diagnostics.skewness = doubles_from(d.value("skewness", nlohmann::json::array()));
    r.diagnostics.excess_kurtosis = doubles_from(d.value("excess_kurtosis", nlohmann::json::array()));
    const auto timing = j.value("timing", nlohmann::json::object());
    for (const auto& [k, v] : timing.items()) r.timing[k] = number_or_nan(v);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment record: ") + e.what());
  }
}

std::string report_json_text(const std::vector<ExperimentRecord>& records) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) arr.push_back(to_json(r));
  // nlohmann::json objects are std::map backed, so keys come out sorted.
  return nlohmann::json{{"records", arr}}.dump(2) + "\n";
}

std::string report_csv_text(const std::vector<ExperimentRecord>& records) {
  std::string out = "method,domain,seed,status,n,r2,rmse,mae\n";
  for (const auto& r : records)
    for (const auto& [domain, m] : r.metrics)
      out += csv_field(r.method) + ',' + csv_field(domain) + ',' + std::to_string(r.seed) + ',' +
             r.status + ',' + std::to_string(m.n) + ',' + format_double(m.r2) + ',' +
             format_double(m.rmse) + ',' + format_double(m.mae) + '\n';
  return out;
}

std::string summary_csv_text(const std::vector<ExperimentRecord>& records) {
  // Groups keep first-appearance order so the table follows the method list.
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<MetricsRecord>> groups;
  for (const auto& r : records) {
    if (r.status != "ok") continue;
    for (const auto& [domain, m] : r.metrics) {
      const auto key = std::make_pair(r.method, domain);
      if (!groups.count(key)) order.push_back(key);
      groups[key].push_back(m);
    }
  }
  auto mean_std = [](const std::vector<MetricsRecord>& ms, double MetricsRecord::*field) {
    double sum = 0.0;
    for (const auto& m : ms) sum += m.*field;
    const double mean = sum / double(ms.size());
    double ss = 0.0;
    for (const auto& m : ms) ss += (m.*field - mean) * (m.*field - mean);
    return std::make_pair(mean, ms.size() > 1 ? std::sqrt(ss / double(ms.size() - 1)) : 0.0);
  };
  std::string out = "method,domain,runs,r2_mean,r2_std,rmse_mean,rmse_std,mae_mean,mae_std\n";
  for (const auto& key : order) {
    const auto& ms = groups[key];
    out += csv_field(key.first) + ',' + csv_field(key.second) + ',' + std::to_string(ms.size());
    for (auto field : {&MetricsRecord::r2, &MetricsRecord::rmse, &MetricsRecord::mae}) {
      const auto [mean, sd] = mean_std(ms, field);
      out += ',' + format_double(mean) + ',' + format_double(sd);
    }
    out += '\n';
  }
  return out;
}

void write_report(const std::vector<ExperimentRecord>& records, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "report.json", report_json_text(records));
  write_text(dir / "report.csv", report_csv_text(records));
  write_text(dir / "summary.csv", summary_csv_text(records));
}

std::vector<ExperimentRecord> read_report(const std::filesystem::path& dir) {
  const auto path = dir / "report.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  std::vector<ExperimentRecord> out;
  for (const auto& r : j.value("records", nlohmann::json::array())) out.push_back(record_from_json(r));
  return out;
}

void export_pca_scatter(const Matrix& source_features, const Matrix& target_features,
                        const SubspaceStats& sub, const std::filesystem::path& path) {
  if (sub.k() < 2) throw DimensionError("export_pca_scatter: needs at least two subspace directions");
  std::string out = "domain_tag,pc1,pc2\n";
  auto emit = [&](const Matrix& z, const char* tag) {
    if (z.rows() == 0) return;
    if (z.cols() != sub.dim()) throw DimensionError("export_pca_scatter: feature width mismatch");
    const Matrix centered = z.rowwise() - sub.mean.transpose();
    const Matrix pcs = centered * sub.basis.topRows(2).transpose();
    for (Index i = 0; i < pcs.rows(); ++i)
      out += std::string(tag) + ',' + format_double(pcs(i, 0)) + ',' + format_double(pcs(i, 1)) + '\n';
  };
  emit(source_features, "source");
  emit(target_features, "target");
  write_text(path, out);
}

}  // namespace ssa
