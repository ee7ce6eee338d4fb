#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gridformer/dataset.hpp"
#include "gridformer/metrics.hpp"
#include "gridformer/model.hpp"
#include "gridformer/optim.hpp"
#include "json.hpp"

namespace gridformer {

// Fractions of each series used for training and validation; the rest is test.
struct SplitConfig {
  double train = 0.8;
  double val = 0.1;
};

struct TrainConfig {
  OptimConfig optim;
  std::size_t batch_size = 8;
  double min_lead_hours = 6.0;
  double max_lead_hours = 168.0;
  std::size_t eval_every = 100;
  std::size_t patience = 5;  // validation rounds without improvement
  std::size_t val_pairs = 32;
  std::size_t max_eval_samples = 256;
  SplitConfig split;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepLogRow {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

std::string step_log_csv(const std::vector<StepLogRow>& log);
void write_step_log(const std::filesystem::path& path, const std::vector<StepLogRow>& log);

struct TrainResult {
  Model model;  // parameters of the best validation round
  std::vector<StepLogRow> log;
  double best_val_loss = 0.0;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  double persistence_val_loss = 0.0;  // X_{t+dt} = X_t on the same validation pairs
  double test_loss = 0.0;             // normalized training objective on the test split (finetune only)
  MetricReport report;
};

// 6-hour-multiple lead times in [min, max] for a series with the given step.
std::vector<double> lead_lattice(double min_hours, double max_hours, std::int64_t step_hours);

// Multi-source pretraining with randomized lead times. Sources share a grid
// and may expose different variables; batches cycle through them in order.
// An empty vocabulary in `config` is filled from the sources.
TrainResult pretrain(ModelConfig config, const std::vector<Dataset>& sources, const TrainConfig& train);

enum class FinetuneMode { direct, all_vars, continuous, iterative, projection_frozen, projection_full, regional, downscale };

std::string to_string(FinetuneMode mode);
FinetuneMode finetune_mode_from_string(const std::string& name);

struct ProtocolSpec {
  FinetuneMode mode = FinetuneMode::direct;
  std::vector<std::string> targets;  // empty: every dynamic variable
  double lead_hours = 72.0;
  double rollout_step_hours = 6.0;
  std::vector<double> eval_leads;  // empty: {lead_hours}
  TokenWindow region;              // regional mode
  std::size_t history = 10;        // projection modes

  void validate() const;
};

void to_json(nlohmann::json& j, const ProtocolSpec& p);
void from_json(const nlohmann::json& j, ProtocolSpec& p);

// Forecast modes use `primary` only. Projection: primary holds the forcing
// inputs, secondary the responses at the same times. Downscale: primary is the
// coarse input, secondary the fine-grid target at the same times.
struct FinetuneData {
  Dataset primary;
  Dataset secondary;
};

inline constexpr double kDownscaleLeadHours = 6.0;

// Reference-scale per-task finetuning learning rates, before lr_scale.
double reference_finetune_lr(FinetuneMode mode);
inline constexpr double kDefaultLrScale = 100.0;

// Finetuning defaults: betas (0.9, 0.999), 500 steps, lr = reference * lr_scale.
TrainConfig finetune_train_config(FinetuneMode mode, double lr_scale = kDefaultLrScale);

TrainResult finetune(Model init, const ProtocolSpec& protocol, const FinetuneData& data, const TrainConfig& train);

struct RolloutResult {
  std::vector<Tensor> states;  // dynamic variables after each step, [B, V_dyn, H, W]
  std::vector<std::string> variables;
  std::size_t forward_calls = 0;
};

// Feeds predictions back as inputs in normalized space; static variables are
// re-injected from x0 at every step.
RolloutResult rollout(const Model& model, const Tensor& x0, const std::vector<std::string>& variables,
                      const std::vector<std::string>& statics, double horizon_hours, double step_hours = 6.0);

enum class Predictor { model, persistence, oracle };
Predictor predictor_from_string(const std::string& name);

// Forecast metrics (RMSE, ACC) on samples [begin, end) of `data`, in physical
// units. Iterative evaluation rolls out at `rollout_step_hours` when set.
MetricReport evaluate_forecast(const Model* model, const Dataset& data, const NormStats& stats,
                               const std::vector<std::string>& targets, const std::vector<double>& leads,
                               std::size_t begin, std::size_t end, Predictor predictor, const std::string& task,
                               std::size_t max_samples = 256, std::optional<double> rollout_step_hours = {},
                               const TokenWindow* region = nullptr);

}  // namespace gridformer
