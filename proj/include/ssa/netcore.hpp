#pragma once

// Feedforward regression network: a stack of Linear -> BatchNorm -> ReLU
// blocks (the feature extractor) followed by a linear head w^T z + b, with a
// hand-written reverse pass over the fixed block sequence.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssa/linalg.hpp"

namespace ssa {

struct LinearLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct BatchNormLayer {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

struct Block {
  LinearLayer linear;
  BatchNormLayer norm;
};

// Train: batch statistics, running statistics updated.
// BatchStat: batch statistics, running statistics frozen.
// Eval: running statistics.
enum class ForwardMode { Train, BatchStat, Eval };

enum class ParamSelector { All, NormAffineOnly, HeadOnly };

struct Architecture {
  Index input_dim = 0;
  std::vector<Index> hidden;  // widths of the extractor blocks; empty = identity extractor
};

/// Gradient (or any parameter-shaped quantity) laid out like the model.
struct ParamSet {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  std::vector<Vector> gammas;
  std::vector<Vector> betas;
  Vector head_w;
  double head_b = 0.0;
};

class RegressionModel;

/// Everything the reverse pass needs from one forward call.
class Tape {
 public:
  Tape() = default;
  bool valid() const { return valid_; }
  ForwardMode mode() const { return mode_; }

 private:
  friend class RegressionModel;
  struct BlockCache {
    Matrix input;
    Matrix normalized;  // x_hat
    Vector inv_std;
    Vector batch_mean;  // empty in Eval mode
    Vector batch_var;
    Matrix output;      // post-ReLU
  };
  bool valid_ = false;
  ForwardMode mode_ = ForwardMode::Eval;
  Architecture arch_;
  std::vector<BlockCache> blocks_;
  Matrix features_;
};

struct ForwardResult {
  Matrix features;     // B x D
  Vector predictions;  // B
  Tape tape;
};

class RegressionModel {
 public:
  RegressionModel() = default;

  /// Kaiming-uniform linear weights, zero biases, gamma = 1, beta = 0,
  /// running mean 0 / var 1, head drawn like a linear layer.
  static RegressionModel create(const Architecture& arch, std::uint64_t seed);

  /// Hidden widths of 100 over four blocks: five linear layers in total.
  static Architecture default_tabular(Index input_dim);

  const Architecture& architecture() const { return arch_; }
  Index input_dim() const { return arch_.input_dim; }
  Index feature_dim() const;

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  Vector& head_w() { return head_w_; }
  const Vector& head_w() const { return head_w_; }
  double& head_b() { return head_b_; }
  double head_b() const { return head_b_; }

  /// Train mode also folds the batch statistics into the running ones:
  /// running = (1 - momentum) * running + momentum * batch (population variance).
  ForwardResult forward(const Matrix& batch, ForwardMode mode);

  /// Never touches running statistics; Train behaves as BatchStat.
  ForwardResult forward(const Matrix& batch, ForwardMode mode) const;

  /// Reverse pass for a loss L(features, predictions) given dL/dfeatures
  /// (B x D, may be empty meaning zero) and dL/dpredictions (B, may be empty).
  ParamSet backward(const Tape& tape, const Matrix& grad_features,
                    const Vector& grad_predictions) const;

  ParamSet zero_like() const;

  std::size_t parameter_count(ParamSelector selector) const;

  nlohmann::json to_json() const;
  static RegressionModel from_json(const nlohmann::json& j);

  void save(const std::filesystem::path& path) const;
  static RegressionModel load(const std::filesystem::path& path);

 private:
  Architecture arch_;
  std::vector<Block> blocks_;
  Vector head_w_;
  double head_b_ = 0.0;
};

/// Flatten the selected parameters in a fixed order: per block weight
/// (row-major), bias, gamma, beta; then head w, head b. Selectors keep this
/// order restricted to their members.
Vector flatten(const ParamSet& params, ParamSelector selector);
Vector snapshot_params(const RegressionModel& model, ParamSelector selector);
void restore_params(RegressionModel& model, ParamSelector selector, const Vector& flat);

/// Bitwise equality of everything except normalization gamma and beta:
/// linear weights and biases, running statistics and the head.
bool same_non_affine_state(const RegressionModel& a, const RegressionModel& b);

/// Parameters of the model viewed as a ParamSet (copy).
ParamSet params_of(const RegressionModel& model);

const char* to_string(ParamSelector selector);
ParamSelector parse_param_selector(const std::string& name);
const char* to_string(ForwardMode mode);
ForwardMode parse_forward_mode(const std::string& name);

}  // namespace ssa
