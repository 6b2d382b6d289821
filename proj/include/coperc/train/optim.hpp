#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coperc/autodiff/tape.hpp"
#include "coperc/models/model.hpp"

namespace coperc::train {

struct AdamConfig {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled: p -= lr * weight_decay * p, separate from the moment update.
  double weight_decay = 1e-4;
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  /// One update of every parameter; missing gradients count as zero.
  void step(models::ModelParams& params, const std::map<std::string, ad::Tensor>& grads);

  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  std::int64_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// Learning rate in effect during `epoch` (0-based): base multiplied by
/// `factor` once for every drop epoch <= epoch.
double lr_at(int epoch, double base, const std::vector<int>& drops, double factor);

/// Parameter gradients of one backward pass, keyed by parameter name.
std::map<std::string, ad::Tensor> param_grads(const ad::Gradients& grads,
                                              const std::map<std::string, ad::Tensor>& tracked);

}  // namespace coperc::train
