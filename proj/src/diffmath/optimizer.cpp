#include "enprompt/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "enprompt/errors.hpp"

namespace enprompt {

SgdMomentum::SgdMomentum(double learning_rate, double momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate >= 0.0)) throw ParameterError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ParameterError("momentum must lie in [0, 1)");
  }
}

void SgdMomentum::step(ParameterRegistry& params, const GradientMap& grads) {
  for (auto& p : params.entries()) {
    if (p.frozen) continue;
    auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    auto [vel_it, inserted] = velocity_.try_emplace(
        p.name, p.value.rows(), p.value.cols(), 0.0, Role::weight);
    auto vel = vel_it->second.values();
    auto g = it->second.values();
    auto w = p.value.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      w[i] -= learning_rate_ * vel[i];
    }
  }
}

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : learning_rate_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(learning_rate >= 0.0)) throw ParameterError("learning rate must be >= 0");
}

void Adam::step(ParameterRegistry& params, const GradientMap& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& p : params.entries()) {
    if (p.frozen) continue;
    auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    auto& m = m_.try_emplace(p.name, p.value.rows(), p.value.cols(), 0.0,
                             Role::weight).first->second;
    auto& v = v_.try_emplace(p.name, p.value.rows(), p.value.cols(), 0.0,
                             Role::weight).first->second;
    auto g = it->second.values();
    auto w = p.value.values();
    auto mv = m.values();
    auto vv = v.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mv[i] = beta1_ * mv[i] + (1.0 - beta1_) * g[i];
      vv[i] = beta2_ * vv[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= learning_rate_ * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + eps_);
    }
  }
}

double cosine_decay(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double progress =
      static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace enprompt
