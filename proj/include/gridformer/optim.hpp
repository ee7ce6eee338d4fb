#pragma once

#include <map>
#include <string>
#include <vector>

#include "gridformer/param_store.hpp"
#include "json.hpp"

namespace gridformer {

struct OptimConfig {
  double peak_lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  double grad_clip = 0.0;  // global-norm clip, 0 disables

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);

// Linear warmup to peak over warmup_steps, then cosine decay to 0 at total_steps.
double lr_at(std::size_t step, const OptimConfig& cfg);

// Decoupled weight decay Adam. Parameters without requires_grad or without a
// gradient are skipped; positional embeddings are never decayed.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg);

  // Throws NumericError before touching anything if a gradient is non-finite.
  void step(ParamStore& params, double lr);
  std::size_t steps() const { return steps_; }
  const OptimConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<double> m, v;
    std::size_t t = 0;
  };
  OptimConfig cfg_;
  std::map<std::string, Moments> state_;
  std::size_t steps_ = 0;
};

}  // namespace gridformer
