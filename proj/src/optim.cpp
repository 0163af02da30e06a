#include "flowscan/optim.hpp"

#include <cmath>

#include "flowscan/errors.hpp"

namespace flowscan {

autodiff::Var ParamStore::param(const std::string& name, Tensor init) {
  if (params_.count(name)) {
    throw ConfigError("parameter '" + name + "' is already registered");
  }
  autodiff::Var node = autodiff::leaf(std::move(init));
  params_.emplace(name, node);
  return node;
}

autodiff::Var ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) > 0; }

std::size_t ParamStore::count_scalars() const {
  std::size_t total = 0;
  for (const auto& [name, node] : params_) total += node->value.numel();
  return total;
}

void ParamStore::randomize_uniform(Rng& rng, double scale) {
  for (auto& [name, node] : params_) {
    double* data = node->value.data();
    const std::size_t n = node->value.numel();
    for (std::size_t i = 0; i < n; ++i) data[i] = (2.0 * rng.uniform() - 1.0) * scale;
  }
}

void ParamStore::clear_grads() {
  for (auto& [name, node] : params_) node->clear_grad();
}

void ParamStore::zero_missing_grads() {
  for (auto& [name, node] : params_) {
    if (!node->has_grad()) {
      node->ensure_grad();
      node->grad.fill(0.0);
    }
  }
}

double ParamStore::grad_norm() const {
  double total = 0.0;
  for (const auto& [name, node] : params_) {
    if (!node->has_grad()) continue;
    const double* g = node->grad.data();
    const std::size_t n = node->grad.numel();
    for (std::size_t i = 0; i < n; ++i) total += g[i] * g[i];
  }
  return std::sqrt(total);
}

double ParamStore::clip_grad_norm(double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_grad_norm: max_norm must be positive");
  const double norm = grad_norm();
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, node] : params_) {
      if (!node->has_grad()) continue;
      double* g = node->grad.data();
      const std::size_t n = node->grad.numel();
      for (std::size_t i = 0; i < n; ++i) g[i] *= scale;
    }
  }
  return norm;
}

void ParamStore::adam_step(const AdamConfig& config) {
  if (config.lr <= 0.0) throw ConfigError("adam_step: lr must be positive");
  if (config.beta1 < 0.0 || config.beta1 >= 1.0 || config.beta2 < 0.0 || config.beta2 >= 1.0) {
    throw ConfigError("adam_step: betas must lie in [0, 1)");
  }
  if (config.eps <= 0.0) throw ConfigError("adam_step: eps must be positive");
  for (auto& [name, node] : params_) {
    if (!node->has_grad()) {
      throw ConfigError("adam_step: parameter '" + name + "' has no gradient");
    }
    AdamSlot& slot = slots_[name];
    if (!slot.m.defined()) {
      slot.m = Tensor(node->value.shape());
      slot.v = Tensor(node->value.shape());
    }
    slot.t += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(slot.t));
    double* x = node->value.data();
    const double* g = node->grad.data();
    double* m = slot.m.data();
    double* v = slot.v.data();
    const std::size_t n = node->value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      x[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
    if (!node->value.all_finite()) {
      throw NumericError("adam_step produced a non-finite value in '" + name + "'");
    }
  }
  clear_grads();
}

void ParamStore::reset_optimizer_state() { slots_.clear(); }

void backward(const autodiff::Var& loss, ParamStore& store) {
  autodiff::backward(loss);
  store.zero_missing_grads();
}

}  // namespace flowscan
