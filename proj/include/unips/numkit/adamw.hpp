#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/numkit/nn.hpp"

namespace unips::nk {

/// Step decay: base * factor^floor(epoch / period).
struct StepDecay {
  double base_lr = 1e-4;
  double factor = 0.8;
  int period_epochs = 3;

  double lr_at(int epoch) const {
    return base_lr * std::pow(factor, static_cast<double>(epoch / period_epochs));
  }
};

/// AdamW with decoupled weight decay: the decay shrinks parameters directly
/// and never enters the moment estimates.
template <class T>
class AdamW {
public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamW() = default;
  explicit AdamW(Options opt) : opt_(opt) {}

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  const Options& options() const { return opt_; }
  std::int64_t step_count() const { return step_; }

  /// Applies one update to every parameter using its accumulated gradient
  /// (absent gradient counts as zero), then clears the gradients. Throws
  /// without touching anything if any gradient is non-finite.
  void step(ParamList<T>& params) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter list changed between steps");
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& t = *params[k].tensor;
      if (static_cast<std::int64_t>(m_[k].size()) != t.numel())
        throw ShapeError("AdamW: moment shape mismatch for " + params[k].name);
      if (!t.has_grad()) continue;
      for (T g : t.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("AdamW: non-finite gradient in " + params[k].name + "; step rejected");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    const double decay = 1.0 - opt_.lr * opt_.weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& t = *params[k].tensor;
      auto p = t.data();
      const bool has = t.has_grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = has ? static_cast<double>(t.grad()[i]) : 0.0;
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double x = static_cast<double>(p[i]) * decay;
        x -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        p[i] = static_cast<T>(x);
      }
      t.zero_grad();
    }
  }

  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  /// Restores state saved alongside a checkpoint.
  void restore(std::int64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

private:
  Options opt_{};
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace unips::nk
