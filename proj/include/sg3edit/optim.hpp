#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "core.hpp"

namespace sg3 {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of parameter buffers. The buffer list (and sizes)
/// must be the same on every step.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }

  void step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads) {
    require(params.size() == grads.size(), ErrorCode::DimensionMismatch, "adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (auto p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    require(m_.size() == params.size(), ErrorCode::DimensionMismatch, "adam: parameter list changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
      auto p = params[b];
      auto g = grads[b];
      require(p.size() == g.size() && p.size() == m_[b].size(), ErrorCode::DimensionMismatch,
              "adam: buffer size changed");
      auto& m = m_[b];
      auto& v = v_[b];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <typename Range>
std::vector<std::span<const double>> as_const_views(const Range& views) {
  std::vector<std::span<const double>> out;
  for (auto v : views) out.emplace_back(v.data(), v.size());
  return out;
}

}  // namespace sg3
