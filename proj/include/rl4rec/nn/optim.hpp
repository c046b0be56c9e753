#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rl4rec/error.hpp"
#include "rl4rec/nn/tensor.hpp"

namespace rl4rec::nn {

enum class OptimizerKind { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global L2 gradient-norm clip; 0 disables.
  double max_grad_norm = 0.0;
};

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig cfg, std::vector<Parameter*> params)
      : cfg_(cfg), params_(std::move(params)) {
    if (!(cfg_.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (cfg_.kind == OptimizerKind::Adam) {
      for (Parameter* p : params_) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return steps_; }
  const std::vector<Parameter*>& parameters() const { return params_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  void zero_grad() {
    for (Parameter* p : params_) {
      if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.rows(), p->value.cols());
      p->zero_grad();
    }
  }

  void step() {
    double scale = 1.0;
    double sq = 0.0;
    for (Parameter* p : params_) {
      if (!p->grad.same_shape(p->value)) {
        throw ContractViolation("optimizer_step: missing gradient for " + p->name);
      }
      if (!p->grad.all_finite()) {
        throw NumericError("optimizer_step: non-finite gradient for " + p->name);
      }
      for (double g : p->grad.values()) sq += g * g;
    }
    if (cfg_.max_grad_norm > 0.0) {
      const double norm = std::sqrt(sq);
      if (norm > cfg_.max_grad_norm) scale = cfg_.max_grad_norm / norm;
    }
    ++steps_;
    const double lr = cfg_.learning_rate;
    if (cfg_.kind == OptimizerKind::SGD) {
      for (Parameter* p : params_)
        for (std::size_t i = 0; i < p->value.size(); ++i)
          p->value[i] -= lr * scale * p->grad[i];
      return;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = scale * p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  std::uint64_t steps_ = 0;
};

}  // namespace rl4rec::nn
