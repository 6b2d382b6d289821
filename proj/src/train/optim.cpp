#include "coperc/train/optim.hpp"

#include <cmath>

namespace coperc::train {

void Adam::step(models::ModelParams& params, const std::map<std::string, ad::Tensor>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, value] : params.entries()) {
    const auto n = static_cast<std::size_t>(value.numel());
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    auto it = grads.find(name);
    std::span<const double> g;
    if (it != grads.end()) g = it->second.values();
    auto p = value.values();
    std::vector<double> next(p.begin(), p.end());
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double step = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      next[i] -= config_.lr * (step + config_.weight_decay * next[i]);
    }
    params.set(name, ad::Tensor(value.shape(), std::move(next)));
  }
}

double lr_at(int epoch, double base, const std::vector<int>& drops, double factor) {
  double lr = base;
  for (int d : drops)
    if (epoch >= d) lr *= factor;
  return lr;
}

std::map<std::string, ad::Tensor> param_grads(const ad::Gradients& grads,
                                              const std::map<std::string, ad::Tensor>& tracked) {
  std::map<std::string, ad::Tensor> out;
  for (const auto& [name, t] : tracked)
    if (grads.has(t)) out.emplace(name, grads.of(t));
  return out;
}

}  // namespace coperc::train
