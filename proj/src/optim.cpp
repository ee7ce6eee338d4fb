#include "gridformer/optim.hpp"

#include <cmath>
#include <numbers>

#include "gridformer/error.hpp"
#include "gridformer/model.hpp"

namespace gridformer {

void OptimConfig::validate() const {
  if (warmup_steps > total_steps) throw ValidationError("warmup_steps exceeds total_steps");
  if (peak_lr < 0.0 || weight_decay < 0.0 || grad_clip < 0.0) {
    throw ValidationError("learning rate, weight decay and clip must be non-negative");
  }
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ValidationError("betas must lie in [0, 1)");
  if (eps <= 0.0) throw ValidationError("eps must be positive");
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"peak_lr", c.peak_lr},         {"beta1", c.beta1},
       {"beta2", c.beta2},             {"eps", c.eps},
       {"weight_decay", c.weight_decay}, {"warmup_steps", c.warmup_steps},
       {"total_steps", c.total_steps}, {"grad_clip", c.grad_clip}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  OptimConfig d;
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
}

double lr_at(std::size_t step, const OptimConfig& c) {
  if (step < c.warmup_steps) {
    return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  if (step >= c.total_steps) return 0.0;
  double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
  return std::max(0.0, c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

AdamW::AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void AdamW::step(ParamStore& params, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be finite and non-negative");
  double sq_norm = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in '" + name + "'; step aborted");
      sq_norm += g * g;
    }
  }
  double clip = 1.0;
  if (cfg_.grad_clip > 0.0) {
    double norm = std::sqrt(sq_norm);
    if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
  }
  bool round = precision() == Precision::f32;
  ++steps_;
  for (auto& [name, t] : params) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    auto& s = state_[name];
    auto data = t.mutable_data();
    auto grad = t.grad();
    if (s.m.empty()) {
      s.m.assign(data.size(), 0.0);
      s.v.assign(data.size(), 0.0);
    }
    ++s.t;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    bool decay = cfg_.weight_decay > 0.0 && !is_positional_parameter(name);
    for (std::size_t i = 0; i < data.size(); ++i) {
      double g = grad[i] * clip;
      if (decay) data[i] -= lr * cfg_.weight_decay * data[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      if (round) data[i] = static_cast<double>(static_cast<float>(data[i]));
    }
  }
}

}  // namespace gridformer
