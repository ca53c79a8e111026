#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "enprompt/tape.hpp"

namespace enprompt {

// SGD with heavy-ball momentum: v <- mu*v + g; w <- w - lr*v.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum);

  void step(ParameterRegistry& params, const GradientMap& grads);
  double learning_rate() const noexcept { return learning_rate_; }
  void set_learning_rate(double lr) noexcept { learning_rate_ = lr; }

 private:
  double learning_rate_;
  double momentum_;
  std::map<std::string, Matrix, std::less<>> velocity_;
};

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void step(ParameterRegistry& params, const GradientMap& grads);
  void set_learning_rate(double lr) noexcept { learning_rate_ = lr; }

 private:
  double learning_rate_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
  std::map<std::string, Matrix, std::less<>> m_;
  std::map<std::string, Matrix, std::less<>> v_;
};

// Cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_decay(double base_lr, std::size_t step, std::size_t total_steps);

}  // namespace enprompt
