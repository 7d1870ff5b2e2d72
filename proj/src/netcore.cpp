#include "ssa/netcore.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <utility>

#include "ssa/errors.hpp"

namespace ssa {

namespace {

constexpr const char* kCheckpointFormat = "ssa-tta-model";
constexpr int kCheckpointVersion = 1;

void init_linear(LinearLayer& layer, Index in, Index out, std::mt19937_64& rng) {
  // Kaiming-uniform for ReLU: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<Index>(in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  layer.weight.resize(out, in);
  for (Index r = 0; r < out; ++r)
    for (Index c = 0; c < in; ++c) layer.weight(r, c) = dist(rng);
  layer.bias = Vector::Zero(out);
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string("forward: non-finite ") + what);
}

void flatten_into(std::vector<double>& out, const Matrix& m) {
  out.insert(out.end(), m.data(), m.data() + m.size());
}
void flatten_into(std::vector<double>& out, const Vector& v) {
  out.insert(out.end(), v.data(), v.data() + v.size());
}

template <typename T>
void read_from(const Vector& flat, Index& pos, T& target) {
  std::copy(flat.data() + pos, flat.data() + pos + target.size(), target.data());
  pos += target.size();
}

nlohmann::json vector_json(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vector json_vector(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) rows.push_back(vector_json(m.row(r).transpose()));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Matrix json_matrix(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  Matrix m(rows, cols);
  const auto& data = j.at("data");
  if (static_cast<Index>(data.size()) != rows)
    throw ConfigError("checkpoint: matrix row count mismatch");
  for (Index r = 0; r < rows; ++r) {
    const Vector row = json_vector(data[static_cast<std::size_t>(r)]);
    if (row.size() != cols) throw ConfigError("checkpoint: matrix column count mismatch");
    m.row(r) = row.transpose();
  }
  return m;
}

}  // namespace

Architecture RegressionModel::default_tabular(Index input_dim) {
  return {input_dim, {100, 100, 100, 100}};
}

RegressionModel RegressionModel::create(const Architecture& arch, std::uint64_t seed) {
  if (arch.input_dim <= 0) throw ConfigError("model: input dimension must be positive");
  RegressionModel model;
  model.arch_ = arch;
  std::mt19937_64 rng(seed);
  Index in = arch.input_dim;
  for (const Index width : arch.hidden) {
    if (width <= 0) throw ConfigError("model: hidden widths must be positive");
    Block block;
    init_linear(block.linear, in, width, rng);
    block.norm.gamma = Vector::Ones(width);
    block.norm.beta = Vector::Zero(width);
    block.norm.running_mean = Vector::Zero(width);
    block.norm.running_var = Vector::Ones(width);
    model.blocks_.push_back(std::move(block));
    in = width;
  }
  LinearLayer head;
  init_linear(head, in, 1, rng);
  model.head_w_ = head.weight.row(0).transpose();
  model.head_b_ = 0.0;
  return model;
}

Index RegressionModel::feature_dim() const {
  return arch_.hidden.empty() ? arch_.input_dim : arch_.hidden.back();
}

ForwardResult RegressionModel::forward(const Matrix& batch, ForwardMode mode) {
  ForwardResult out = std::as_const(*this).forward(batch, mode);
  if (mode == ForwardMode::Train) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& norm = blocks_[i].norm;
      const auto& cache = out.tape.blocks_[i];
      const double m = norm.momentum;
      norm.running_mean = (1.0 - m) * norm.running_mean + m * cache.batch_mean;
      norm.running_var = (1.0 - m) * norm.running_var + m * cache.batch_var;
    }
  }
  return out;
}

ForwardResult RegressionModel::forward(const Matrix& batch, ForwardMode mode) const {
  if (batch.cols() != arch_.input_dim)
    throw DimensionError("forward: batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(arch_.input_dim));
  const bool batch_stats = mode != ForwardMode::Eval;
  const Index b = batch.rows();
  if (batch_stats && b < 2 && !blocks_.empty())
    throw BatchTooSmallError("forward: batch statistics need at least 2 rows, got " +
                             std::to_string(b));
  check_finite(batch, "input");

  ForwardResult out;
  out.tape.mode_ = mode;
  out.tape.arch_ = arch_;
  out.tape.blocks_.reserve(blocks_.size());

  Matrix x = batch;
  for (const auto& block : blocks_) {
    Tape::BlockCache cache;
    cache.input = x;
    Matrix h = x * block.linear.weight.transpose();
    h.rowwise() += block.linear.bias.transpose();

    Vector mean;
    Vector var;
    if (batch_stats) {
      mean = h.colwise().mean().transpose();
      var = (h.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
      cache.batch_mean = mean;
      cache.batch_var = var;
    } else {
      mean = block.norm.running_mean;
      var = block.norm.running_var;
    }
    cache.inv_std = (var.array() + block.norm.epsilon).rsqrt().matrix();
    cache.normalized = ((h.rowwise() - mean.transpose()).array().rowwise() *
                        cache.inv_std.transpose().array())
                           .matrix();
    Matrix y = (cache.normalized.array().rowwise() * block.norm.gamma.transpose().array())
                   .matrix();
    y.rowwise() += block.norm.beta.transpose();
    x = y.cwiseMax(0.0);
    check_finite(x, "activation");
    cache.output = x;
    out.tape.blocks_.push_back(std::move(cache));
  }

  out.features = std::move(x);
  out.predictions = (out.features * head_w_).array() + head_b_;
  if (!out.predictions.allFinite()) throw NumericalError("forward: non-finite prediction");
  out.tape.features_ = out.features;
  out.tape.valid_ = true;
  return out;
}

ParamSet RegressionModel::zero_like() const {
  ParamSet g;
  for (const auto& block : blocks_) {
    g.weights.push_back(Matrix::Zero(block.linear.weight.rows(), block.linear.weight.cols()));
    g.biases.push_back(Vector::Zero(block.linear.bias.size()));
    g.gammas.push_back(Vector::Zero(block.norm.gamma.size()));
    g.betas.push_back(Vector::Zero(block.norm.beta.size()));
  }
  g.head_w = Vector::Zero(head_w_.size());
  g.head_b = 0.0;
  return g;
}

ParamSet RegressionModel::backward(const Tape& tape, const Matrix& grad_features,
                                   const Vector& grad_predictions) const {
  if (!tape.valid()) throw UsageError("backward: tape holds no forward pass");
  if (tape.arch_.input_dim != arch_.input_dim || tape.arch_.hidden != arch_.hidden)
    throw UsageError("backward: tape was recorded by a different architecture");
  const Index b = tape.features_.rows();
  const Index d = feature_dim();

  ParamSet g = zero_like();
  Matrix d_x = Matrix::Zero(b, d);
  if (grad_features.size() != 0) {
    if (grad_features.rows() != b || grad_features.cols() != d)
      throw DimensionError("backward: feature gradient shape mismatch");
    d_x = grad_features;
  }
  if (grad_predictions.size() != 0) {
    if (grad_predictions.size() != b)
      throw DimensionError("backward: prediction gradient length mismatch");
    g.head_w = tape.features_.transpose() * grad_predictions;
    g.head_b = grad_predictions.sum();
    d_x += grad_predictions * head_w_.transpose();
  }

  const bool batch_stats = tape.mode() != ForwardMode::Eval;
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    const auto& block = blocks_[i];
    const auto& cache = tape.blocks_[i];
    const Matrix d_y = (cache.output.array() > 0.0).select(d_x, 0.0);
    g.gammas[i] = (d_y.array() * cache.normalized.array()).colwise().sum().transpose();
    g.betas[i] = d_y.colwise().sum().transpose();
    const Matrix d_xhat = (d_y.array().rowwise() * block.norm.gamma.transpose().array()).matrix();

    Matrix d_h;
    if (batch_stats) {
      // dh = inv_std / B * (B dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
      const double bn = static_cast<double>(b);
      const Eigen::RowVectorXd sum_d = d_xhat.colwise().sum();
      const Eigen::RowVectorXd sum_dx =
          (d_xhat.array() * cache.normalized.array()).colwise().sum().matrix();
      Matrix t = bn * d_xhat;
      t.rowwise() -= sum_d;
      t -= (cache.normalized.array().rowwise() * sum_dx.array()).matrix();
      d_h = (t.array().rowwise() * (cache.inv_std.transpose().array() / bn)).matrix();
    } else {
      d_h = (d_xhat.array().rowwise() * cache.inv_std.transpose().array()).matrix();
    }
    g.weights[i] = d_h.transpose() * cache.input;
    g.biases[i] = d_h.colwise().sum().transpose();
    d_x = d_h * block.linear.weight;
  }
  return g;
}

std::size_t RegressionModel::parameter_count(ParamSelector selector) const {
  return static_cast<std::size_t>(snapshot_params(*this, selector).size());
}

namespace {

template <typename Dense>
bool same_bits(const Dense& a, const Dense& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * std::size_t(a.size())) == 0;
}

}  // namespace

bool same_non_affine_state(const RegressionModel& a, const RegressionModel& b) {
  if (a.blocks().size() != b.blocks().size()) return false;
  for (std::size_t i = 0; i < a.blocks().size(); ++i) {
    const auto& x = a.blocks()[i];
    const auto& y = b.blocks()[i];
    if (!same_bits(x.linear.weight, y.linear.weight) || !same_bits(x.linear.bias, y.linear.bias) ||
        !same_bits(x.norm.running_mean, y.norm.running_mean) ||
        !same_bits(x.norm.running_var, y.norm.running_var))
      return false;
  }
  const double ab = a.head_b(), bb = b.head_b();
  return same_bits(a.head_w(), b.head_w()) && std::memcmp(&ab, &bb, sizeof ab) == 0;
}

ParamSet params_of(const RegressionModel& model) {
  ParamSet p;
  for (const auto& block : model.blocks()) {
    p.weights.push_back(block.linear.weight);
    p.biases.push_back(block.linear.bias);
    p.gammas.push_back(block.norm.gamma);
    p.betas.push_back(block.norm.beta);
  }
  p.head_w = model.head_w();
  p.head_b = model.head_b();
  return p;
}

Vector flatten(const ParamSet& params, ParamSelector selector) {
  std::vector<double> out;
  for (std::size_t i = 0; i < params.gammas.size(); ++i) {
    if (selector == ParamSelector::All) {
      flatten_into(out, params.weights[i]);
      flatten_into(out, params.biases[i]);
    }
    if (selector != ParamSelector::HeadOnly) {
      flatten_into(out, params.gammas[i]);
      flatten_into(out, params.betas[i]);
    }
  }
  if (selector != ParamSelector::NormAffineOnly) {
    flatten_into(out, params.head_w);
    out.push_back(params.head_b);
  }
  return Eigen::Map<const Vector>(out.data(), static_cast<Index>(out.size()));
}

Vector snapshot_params(const RegressionModel& model, ParamSelector selector) {
  return flatten(params_of(model), selector);
}

void restore_params(RegressionModel& model, ParamSelector selector, const Vector& flat) {
  const auto expected = static_cast<Index>(model.parameter_count(selector));
  if (flat.size() != expected)
    throw DimensionError("restore_params: expected " + std::to_string(expected) +
                         " values for " + to_string(selector) + ", got " +
                         std::to_string(flat.size()));
  Index pos = 0;
  for (auto& block : model.blocks()) {
    if (selector == ParamSelector::All) {
      read_from(flat, pos, block.linear.weight);
      read_from(flat, pos, block.linear.bias);
    }
    if (selector != ParamSelector::HeadOnly) {
      read_from(flat, pos, block.norm.gamma);
      read_from(flat, pos, block.norm.beta);
    }
  }
  if (selector != ParamSelector::NormAffineOnly) {
    read_from(flat, pos, model.head_w());
    model.head_b() = flat(pos++);
  }
}

nlohmann::json RegressionModel::to_json() const {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& block : blocks_) {
    blocks.push_back({{"weight", matrix_json(block.linear.weight)},
                      {"bias", vector_json(block.linear.bias)},
                      {"gamma", vector_json(block.norm.gamma)},
                      {"beta", vector_json(block.norm.beta)},
                      {"running_mean", vector_json(block.norm.running_mean)},
                      {"running_var", vector_json(block.norm.running_var)},
                      {"momentum", block.norm.momentum},
                      {"epsilon", block.norm.epsilon}});
  }
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"architecture", {{"input_dim", arch_.input_dim}, {"hidden", arch_.hidden}}},
          {"blocks", blocks},
          {"head", {{"w", vector_json(head_w_)}, {"b", head_b_}}}};
}

RegressionModel RegressionModel::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw ConfigError("checkpoint: unknown format");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw ConfigError("checkpoint: unsupported version");
    RegressionModel model;
    model.arch_.input_dim = j.at("architecture").at("input_dim").get<Index>();
    model.arch_.hidden = j.at("architecture").at("hidden").get<std::vector<Index>>();
    const auto& blocks = j.at("blocks");
    if (blocks.size() != model.arch_.hidden.size())
      throw ConfigError("checkpoint: block count does not match architecture");
    Index in = model.arch_.input_dim;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& jb = blocks[i];
      const Index width = model.arch_.hidden[i];
      Block block;
      block.linear.weight = json_matrix(jb.at("weight"));
      block.linear.bias = json_vector(jb.at("bias"));
      block.norm.gamma = json_vector(jb.at("gamma"));
      block.norm.beta = json_vector(jb.at("beta"));
      block.norm.running_mean = json_vector(jb.at("running_mean"));
      block.norm.running_var = json_vector(jb.at("running_var"));
      block.norm.momentum = jb.at("momentum").get<double>();
      block.norm.epsilon = jb.at("epsilon").get<double>();
      if (block.linear.weight.rows() != width || block.linear.weight.cols() != in ||
          block.linear.bias.size() != width || block.norm.gamma.size() != width ||
          block.norm.beta.size() != width || block.norm.running_mean.size() != width ||
          block.norm.running_var.size() != width)
        throw ConfigError("checkpoint: block " + std::to_string(i) +
                          " shapes do not match architecture");
      model.blocks_.push_back(std::move(block));
      in = width;
    }
    model.head_w_ = json_vector(j.at("head").at("w"));
    model.head_b_ = j.at("head").at("b").get<double>();
    if (model.head_w_.size() != in) throw ConfigError("checkpoint: head width mismatch");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed record: ") + e.what());
  }
}

void RegressionModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << to_json().dump(1) << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

RegressionModel RegressionModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

const char* to_string(ParamSelector selector) {
  switch (selector) {
    case ParamSelector::All:
      return "all";
    case ParamSelector::NormAffineOnly:
      return "norm_affine";
    case ParamSelector::HeadOnly:
      return "head";
  }
  return "?";
}

ParamSelector parse_param_selector(const std::string& name) {
  if (name == "all") return ParamSelector::All;
  if (name == "norm_affine") return ParamSelector::NormAffineOnly;
  if (name == "head") return ParamSelector::HeadOnly;
  throw ConfigError("unknown parameter selector '" + name + "'");
}

const char* to_string(ForwardMode mode) {
  switch (mode) {
    case ForwardMode::Train:
      return "train";
    case ForwardMode::BatchStat:
      return "batch_stat";
    case ForwardMode::Eval:
      return "eval";
  }
  return "?";
}

ForwardMode parse_forward_mode(const std::string& name) {
  if (name == "train") return ForwardMode::Train;
  if (name == "batch_stat") return ForwardMode::BatchStat;
  if (name == "eval") return ForwardMode::Eval;
  throw ConfigError("unknown forward mode '" + name + "'");
}

}  // namespace ssa
