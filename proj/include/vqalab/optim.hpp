#pragma once

#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/policy.hpp"

namespace vqalab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline nlohmann::ordered_json optimizer_record(const AdamConfig& c, double lr) {
  return {{"name", "adam"}, {"lr", lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

/// Adaptive-moment descent over the trainable flat tensors of a Model.
class Adam {
 public:
  Adam(const Model& m, std::vector<bool> trainable, double lr, AdamConfig cfg = {})
      : cfg_(cfg), lr_(lr), trainable_(std::move(trainable)) {
    for (std::size_t i = 0; i < m.tensor_count(); ++i) {
      m_.emplace_back(m.tensor(i).rows, m.tensor(i).cols);
      v_.emplace_back(m.tensor(i).rows, m.tensor(i).cols);
    }
  }

  /// One descent step along `grad` (callers negate for ascent).
  void step(Model& model, const Gradient& grad) {
    if (grad.size() != model.tensor_count()) throw InternalError("gradient/model tensor count mismatch");
    ++t_;
    if (lr_ == 0.0) return;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (!trainable_[i]) continue;
      Matrix& p = model.tensor(i);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = grad[i].data[k];
        double& m = m_[i].data[k];
        double& v = v_[i].data[k];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        p.data[k] -= lr_ * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  double lr_;
  std::vector<bool> trainable_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

inline void add_scaled(Gradient& acc, const Gradient& g, double s) {
  for (std::size_t i = 0; i < acc.size(); ++i)
    for (std::size_t k = 0; k < acc[i].size(); ++k) acc[i].data[k] += s * g[i].data[k];
}

}  // namespace vqalab
