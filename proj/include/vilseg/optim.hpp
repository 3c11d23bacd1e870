#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "vilseg/config.hpp"
#include "vilseg/nn.hpp"

namespace vilseg {

struct ScheduleValues {
  double lr = 0;
  double weight_decay = 0;
};

/// Linear warmup of learning rate and weight decay from 0 to their peaks over
/// warmup_iters, then constant (or cosine-annealed to 0 when enabled).
inline ScheduleValues schedule(long step, const TrainConfig& cfg, long total_steps = 0) {
  if (step < 0) throw InputError("schedule: step must be >= 0");
  double factor = 1.0;
  if (step < cfg.warmup_iters) {
    factor = static_cast<double>(step) / cfg.warmup_iters;
  } else if (cfg.cosine_after_warmup && total_steps > cfg.warmup_iters) {
    const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_iters) / (total_steps - cfg.warmup_iters));
    factor = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  return {cfg.peak_lr * factor, cfg.peak_weight_decay * factor};
}

/// Adam with decoupled weight decay. A tensor whose gradient is entirely zero
/// is left untouched when no decay applies to it at this step.
template <typename S>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Scales all gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
  static double clip_grad_norm(nn::ParameterStore<S>& params, double max_norm) {
    double total = 0;
    for (const auto& [_, p] : params.all()) {
      if (p.has_grad()) total += static_cast<double>(p.node()->grad.squaredNorm());
    }
    const double norm = std::sqrt(total);
    if (max_norm > 0 && norm > max_norm) {
      const S factor = static_cast<S>(max_norm / norm);
      for (const auto& [_, p] : params.all()) {
        if (p.has_grad()) p.node()->grad *= factor;
      }
    }
    return norm;
  }

  void step(nn::ParameterStore<S>& params, const ScheduleValues& sched) {
    for (const auto& [name, param] : params.all()) {
      const bool decay = nn::ParameterStore<S>::decays(name) && sched.weight_decay > 0;
      const bool has_grad = param.has_grad() && !param.node()->grad.isZero(0);
      if (!has_grad && !decay) continue;
      auto& value = param.node()->value;
      State& st = state_[name];
      if (st.m.size() == 0) {
        st.m = ad::Matrix<S>::Zero(value.rows(), value.cols());
        st.v = ad::Matrix<S>::Zero(value.rows(), value.cols());
      }
      if (decay) value *= static_cast<S>(1.0 - sched.lr * sched.weight_decay);
      if (!has_grad) continue;
      const auto& g = param.node()->grad;
      ++st.steps;
      st.m = static_cast<S>(beta1_) * st.m + static_cast<S>(1 - beta1_) * g;
      st.v = static_cast<S>(beta2_) * st.v + static_cast<S>(1 - beta2_) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(st.steps));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(st.steps));
      const S step_size = static_cast<S>(sched.lr / c1);
      const S sqrt_c2 = static_cast<S>(std::sqrt(c2));
      value.array() -= step_size * st.m.array() / (st.v.array().sqrt() / sqrt_c2 + static_cast<S>(eps_));
    }
  }

 private:
  struct State {
    ad::Matrix<S> m;
    ad::Matrix<S> v;
    long steps = 0;
  };
  double beta1_;
  double beta2_;
  double eps_;
  std::map<std::string, State> state_;
};

}  // namespace vilseg
