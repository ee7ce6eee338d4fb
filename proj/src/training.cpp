#include "gridformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "gridformer/error.hpp"

namespace gridformer {

void TrainConfig::validate() const {
  optim.validate();
  if (batch_size == 0) throw ValidationError("batch_size must be positive");
  if (!(min_lead_hours > 0.0) || max_lead_hours < min_lead_hours) {
    throw ValidationError("lead range must satisfy 0 < min <= max");
  }
  if (eval_every == 0) throw ValidationError("eval_every must be positive");
  if (patience == 0) throw ValidationError("patience must be positive");
  if (val_pairs == 0 || max_eval_samples == 0) throw ValidationError("validation and evaluation sizes must be positive");
  if (split.train <= 0.0 || split.val <= 0.0 || split.train + split.val >= 1.0) {
    throw ValidationError("split fractions must be positive and leave room for a test split");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"optim", c.optim},
       {"batch_size", c.batch_size},
       {"min_lead_hours", c.min_lead_hours},
       {"max_lead_hours", c.max_lead_hours},
       {"eval_every", c.eval_every},
       {"patience", c.patience},
       {"val_pairs", c.val_pairs},
       {"max_eval_samples", c.max_eval_samples},
       {"split", {{"train", c.split.train}, {"val", c.split.val}}},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.optim = j.value("optim", d.optim);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.min_lead_hours = j.value("min_lead_hours", d.min_lead_hours);
  c.max_lead_hours = j.value("max_lead_hours", d.max_lead_hours);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.patience = j.value("patience", d.patience);
  c.val_pairs = j.value("val_pairs", d.val_pairs);
  c.max_eval_samples = j.value("max_eval_samples", d.max_eval_samples);
  if (j.contains("split")) {
    c.split.train = j["split"].value("train", d.split.train);
    c.split.val = j["split"].value("val", d.split.val);
  }
  c.seed = j.value("seed", d.seed);
}

std::string step_log_csv(const std::vector<StepLogRow>& log) {
  std::ostringstream out;
  out.precision(9);
  out << "step,lr,train_loss,val_loss\n";
  for (const auto& r : log) {
    out << r.step << ',' << r.lr << ',' << r.train_loss << ',';
    if (r.val_loss) out << *r.val_loss;
    out << '\n';
  }
  return out.str();
}

void write_step_log(const std::filesystem::path& path, const std::vector<StepLogRow>& log) {
  std::ofstream out(path);
  out << step_log_csv(log);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<double> lead_lattice(double min_hours, double max_hours, std::int64_t step_hours) {
  if (step_hours <= 0) throw ValidationError("series step must be positive");
  std::vector<double> out;
  for (std::int64_t h = step_hours; static_cast<double>(h) <= max_hours; h += step_hours) {
    if (static_cast<double>(h) >= min_hours) out.push_back(static_cast<double>(h));
  }
  if (out.empty()) {
    throw ValidationError("no lead time in [" + std::to_string(min_hours) + ", " + std::to_string(max_hours) +
                          "] h is a multiple of the " + std::to_string(step_hours) + " h step");
  }
  return out;
}

std::string to_string(FinetuneMode mode) {
  switch (mode) {
    case FinetuneMode::direct: return "direct";
    case FinetuneMode::all_vars: return "all_vars";
    case FinetuneMode::continuous: return "continuous";
    case FinetuneMode::iterative: return "iterative";
    case FinetuneMode::projection_frozen: return "projection_frozen";
    case FinetuneMode::projection_full: return "projection_full";
    case FinetuneMode::regional: return "regional";
    case FinetuneMode::downscale: return "downscale";
  }
  return "unknown";
}

FinetuneMode finetune_mode_from_string(const std::string& name) {
  for (auto m : {FinetuneMode::direct, FinetuneMode::all_vars, FinetuneMode::continuous, FinetuneMode::iterative,
                 FinetuneMode::projection_frozen, FinetuneMode::projection_full, FinetuneMode::regional,
                 FinetuneMode::downscale}) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown finetune mode '" + name + "'");
}

void ProtocolSpec::validate() const {
  if (!(lead_hours > 0.0)) throw ValidationError("lead_hours must be positive");
  if (!(rollout_step_hours > 0.0)) throw ValidationError("rollout_step_hours must be positive");
  if (mode == FinetuneMode::direct && targets.size() != 1) {
    throw ValidationError("direct mode trains exactly one target variable");
  }
  if ((mode == FinetuneMode::projection_frozen || mode == FinetuneMode::projection_full) && history == 0) {
    throw ValidationError("projection needs a history of at least one slice");
  }
  for (double l : eval_leads) {
    if (!(l > 0.0)) throw ValidationError("evaluation lead times must be positive");
  }
}

void to_json(nlohmann::json& j, const ProtocolSpec& p) {
  j = {{"mode", to_string(p.mode)},
       {"targets", p.targets},
       {"lead_hours", p.lead_hours},
       {"rollout_step_hours", p.rollout_step_hours},
       {"eval_leads", p.eval_leads},
       {"region", {{"row0", p.region.row0}, {"rows", p.region.rows}, {"col0", p.region.col0}, {"cols", p.region.cols}}},
       {"history", p.history}};
}

void from_json(const nlohmann::json& j, ProtocolSpec& p) {
  ProtocolSpec d;
  p.mode = finetune_mode_from_string(j.value("mode", to_string(d.mode)));
  p.targets = j.value("targets", d.targets);
  p.lead_hours = j.value("lead_hours", d.lead_hours);
  p.rollout_step_hours = j.value("rollout_step_hours", d.rollout_step_hours);
  p.eval_leads = j.value("eval_leads", d.eval_leads);
  if (j.contains("region")) {
    const auto& r = j["region"];
    p.region = {r.value("row0", std::size_t{0}), r.value("rows", std::size_t{0}), r.value("col0", std::size_t{0}),
                r.value("cols", std::size_t{0})};
  }
  p.history = j.value("history", d.history);
}

double reference_finetune_lr(FinetuneMode mode) {
  switch (mode) {
    case FinetuneMode::projection_frozen:
    case FinetuneMode::projection_full: return 5e-4;
    case FinetuneMode::downscale: return 5e-5;
    default: return 5e-7;
  }
}

TrainConfig finetune_train_config(FinetuneMode mode, double lr_scale) {
  if (!(lr_scale > 0.0)) throw ValidationError("lr_scale must be positive");
  TrainConfig t;
  t.optim.beta2 = 0.999;
  t.optim.total_steps = 500;
  t.optim.peak_lr = reference_finetune_lr(mode) * lr_scale;
  t.eval_every = 50;
  return t;
}

Predictor predictor_from_string(const std::string& name) {
  if (name == "model") return Predictor::model;
  if (name == "persistence") return Predictor::persistence;
  if (name == "oracle") return Predictor::oracle;
  throw ValidationError("unknown predictor '" + name + "' (model, persistence, oracle)");
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32)};
  return std::mt19937_64(seq);
}

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct Splits {
  Range train, val, test;
};

Splits split_series(std::size_t count, const SplitConfig& cfg) {
  auto a = static_cast<std::size_t>(std::floor(static_cast<double>(count) * cfg.train));
  auto b = static_cast<std::size_t>(std::floor(static_cast<double>(count) * (cfg.train + cfg.val)));
  Splits s{{0, a}, {a, b}, {b, count}};
  if (s.train.size() < 2 || s.val.size() < 2 || s.test.size() < 2) {
    throw ValidationError("series of " + std::to_string(count) + " samples is too short to split");
  }
  return s;
}

// Normalized copy of a dataset for batch assembly.
struct Series {
  GridSpec grid;
  std::vector<std::string> variables;
  std::vector<std::string> statics;
  std::int64_t step_hours = 6;
  std::size_t count = 0;
  std::size_t cells = 0;
  std::vector<double> values;  // [T, V, H, W]

  std::size_t index_of(const std::string& name) const {
    auto it = std::find(variables.begin(), variables.end(), name);
    if (it == variables.end()) throw ValidationError("data has no variable '" + name + "'");
    return static_cast<std::size_t>(it - variables.begin());
  }

  std::vector<std::size_t> indices_of(const std::vector<std::string>& names) const {
    std::vector<std::size_t> out;
    for (const auto& n : names) out.push_back(index_of(n));
    return out;
  }

  // [B, k, H, W] of the given variables at the given times.
  Tensor fields(const std::vector<std::size_t>& times, const std::vector<std::size_t>& vars) const {
    std::vector<double> out;
    out.reserve(times.size() * vars.size() * cells);
    std::size_t per = variables.size() * cells;
    for (auto t : times) {
      for (auto v : vars) {
        auto first = values.begin() + static_cast<std::ptrdiff_t>(t * per + v * cells);
        out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(cells));
      }
    }
    return Tensor::from({times.size(), vars.size(), grid.height(), grid.width()}, std::move(out));
  }

  Tensor inputs(const std::vector<std::size_t>& times) const {
    std::vector<std::size_t> all(variables.size());
    std::iota(all.begin(), all.end(), 0);
    return fields(times, all);
  }

  std::size_t lead_steps(double hours) const {
    double k = hours / static_cast<double>(step_hours);
    if (!(hours > 0.0) || std::abs(k - std::round(k)) > 1e-9) {
      throw ValidationError("lead " + std::to_string(hours) + " h is not a positive multiple of the " +
                            std::to_string(step_hours) + " h step");
    }
    return static_cast<std::size_t>(std::llround(k));
  }
};

Series make_series(const Dataset& d, const NormStats& stats) {
  Series s;
  s.grid = d.grid();
  s.variables = d.variables();
  s.statics = d.static_variables();
  s.step_hours = d.step_hours();
  s.count = d.num_samples();
  s.cells = d.grid().cells();
  s.values.resize(d.values().size());
  std::vector<VariableStats> per;
  for (const auto& v : s.variables) per.push_back(stats.at(v));
  auto raw = d.values();
  std::size_t nv = per.size();
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto& st = per[(k / s.cells) % nv];
    s.values[k] = (static_cast<double>(raw[k]) - st.mean) / st.std;
  }
  return s;
}

struct Pair {
  std::size_t t;
  std::size_t k;  // lead in steps
};

std::vector<Pair> sample_pairs(const Range& r, const std::vector<std::size_t>& lead_steps, std::size_t n,
                               std::mt19937_64& rng, bool one_lead_per_batch) {
  std::vector<std::size_t> valid;
  for (auto k : lead_steps) {
    if (k < r.size()) valid.push_back(k);
  }
  if (valid.empty()) throw ValidationError("split of " + std::to_string(r.size()) + " samples is shorter than every lead");
  std::vector<Pair> out;
  std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
  std::size_t shared = valid[pick(rng)];
  for (std::size_t q = 0; q < n; ++q) {
    std::size_t k = one_lead_per_batch ? shared : valid[pick(rng)];
    std::uniform_int_distribution<std::size_t> t(r.begin, r.end - k - 1);
    out.push_back({t(rng), k});
  }
  return out;
}

std::vector<std::size_t> evenly_spaced(std::size_t begin, std::size_t end, std::size_t cap) {
  std::vector<std::size_t> out;
  std::size_t n = end - begin;
  if (n <= cap) {
    for (std::size_t t = begin; t < end; ++t) out.push_back(t);
    return out;
  }
  for (std::size_t q = 0; q < cap; ++q) out.push_back(begin + q * n / cap);
  return out;
}

struct ForecastTask {
  const Series* series = nullptr;
  std::vector<std::string> targets;
  std::vector<std::size_t> target_idx;
  std::vector<double> weights;
  std::optional<TokenWindow> region;
};

Tensor predict(const Model& m, const ForecastTask& task, const Tensor& x, std::span<const double> leads,
               const ForwardOptions& o) {
  if (task.region) return forward_token_subset(m, x, task.series->variables, leads, task.targets, *task.region, o);
  return forward(m, x, task.series->variables, leads, task.targets, o);
}

Tensor forecast_loss(const Model& m, const ForecastTask& task, const std::vector<Pair>& pairs,
                     const ForwardOptions& o) {
  std::vector<std::size_t> t0, t1;
  std::vector<double> leads;
  for (const auto& p : pairs) {
    t0.push_back(p.t);
    t1.push_back(p.t + p.k);
    leads.push_back(static_cast<double>(p.k * static_cast<std::size_t>(task.series->step_hours)));
  }
  Tensor pred = predict(m, task, task.series->inputs(t0), leads, o);
  return lat_mse(pred, task.series->fields(t1, task.target_idx), task.weights);
}

double batched_mean(std::size_t n, std::size_t batch, const std::function<double(std::size_t, std::size_t)>& f) {
  double total = 0.0;
  for (std::size_t b = 0; b < n; b += batch) {
    std::size_t e = std::min(n, b + batch);
    total += f(b, e) * static_cast<double>(e - b);
  }
  return total / static_cast<double>(n);
}

double forecast_val_loss(const Model& m, const ForecastTask& task, const std::vector<Pair>& pairs, std::size_t batch) {
  NoGradGuard guard;
  return batched_mean(pairs.size(), batch, [&](std::size_t b, std::size_t e) {
    std::vector<Pair> chunk(pairs.begin() + static_cast<std::ptrdiff_t>(b), pairs.begin() + static_cast<std::ptrdiff_t>(e));
    return forecast_loss(m, task, chunk, {}).item();
  });
}

double persistence_loss(const ForecastTask& task, const std::vector<Pair>& pairs) {
  NoGradGuard guard;
  std::vector<std::size_t> t0, t1;
  for (const auto& p : pairs) {
    t0.push_back(p.t);
    t1.push_back(p.t + p.k);
  }
  return lat_mse(task.series->fields(t0, task.target_idx), task.series->fields(t1, task.target_idx), task.weights)
      .item();
}

struct LoopHooks {
  std::function<Tensor(const Model&, std::mt19937_64&)> train_loss;
  std::function<double(const Model&)> val_loss;
};

TrainResult run_loop(Model model, const TrainConfig& cfg, const LoopHooks& hooks, std::mt19937_64& rng) {
  AdamW opt(cfg.optim);
  TrainResult r;
  ParamStore best = model.params.clone();
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_rounds = 0;
  for (std::size_t step = 1; step <= cfg.optim.total_steps; ++step) {
    model.params.zero_grad();
    StepLogRow row;
    row.step = step;
    {
      Tensor loss = hooks.train_loss(model, rng);
      loss.backward();
      row.train_loss = loss.item();
    }
    row.lr = lr_at(step, cfg.optim);
    opt.step(model.params, row.lr);
    r.steps_run = step;
    if (step % cfg.eval_every == 0 || step == cfg.optim.total_steps) {
      double v = hooks.val_loss(model);
      row.val_loss = v;
      if (v < best_val) {
        best_val = v;
        best = model.params.clone();
        r.best_step = step;
        bad_rounds = 0;
      } else if (++bad_rounds >= cfg.patience) {
        r.early_stopped = true;
      }
    }
    r.log.push_back(row);
    if (r.early_stopped) break;
  }
  model.params.zero_grad();
  model.params = std::move(best);
  for (auto& [name, t] : model.params) t.set_requires_grad(true);
  r.best_val_loss = best_val;
  r.model = std::move(model);
  return r;
}

void match_grid(Model& m, const GridSpec& grid) {
  if (m.config.grid_h == grid.height() && m.config.grid_w == grid.width()) return;
  std::size_t p = m.config.patch_size;
  if (grid.height() % p != 0 || grid.width() % p != 0) {
    throw ValidationError("patch size " + std::to_string(p) + " does not divide the data grid " +
                          std::to_string(grid.height()) + "x" + std::to_string(grid.width()));
  }
  m = interpolate_pos_embed(m, grid.height() / p, grid.width() / p);
}

std::vector<std::string> resolve_targets(const ProtocolSpec& p, const Dataset& d) {
  std::vector<std::string> targets = p.targets.empty() ? d.dynamic_variables() : p.targets;
  if (targets.empty()) throw ValidationError("no target variables");
  for (const auto& t : targets) {
    if (!d.has_variable(t)) throw ValidationError("target variable '" + t + "' is missing from the data");
    if (d.is_static(t)) throw ValidationError("static variable '" + t + "' cannot be a target");
  }
  return targets;
}

NormStats finetune_stats(const Dataset& d, const Range& train, const NormStats& previous) {
  NormStats s = compute_norm_stats(d, train.begin, train.end);
  s.merge_missing(previous);
  return s;
}

CropIndices window_indices(const TokenWindow& w, std::size_t p) {
  CropIndices idx;
  for (std::size_t i = w.row0 * p; i < (w.row0 + w.rows) * p; ++i) idx.rows.push_back(i);
  for (std::size_t j = w.col0 * p; j < (w.col0 + w.cols) * p; ++j) idx.cols.push_back(j);
  return idx;
}

std::vector<double> denormalized(const Tensor& t, std::size_t channel, std::size_t channels, const VariableStats& s) {
  std::size_t b = t.dim(0), cells = t.numel() / (b * channels);
  std::vector<double> out;
  out.reserve(b * cells);
  for (std::size_t k = 0; k < b; ++k) {
    for (std::size_t c = 0; c < cells; ++c) out.push_back(t.at((k * channels + channel) * cells + c) * s.std + s.mean);
  }
  return out;
}

TrainResult finetune_forecast(Model m, const ProtocolSpec& p, const Dataset& data, const TrainConfig& cfg) {
  auto targets = resolve_targets(p, data);
  if (p.mode == FinetuneMode::iterative) {
    auto dyn = data.dynamic_variables();
    if (std::set<std::string>(targets.begin(), targets.end()) != std::set<std::string>(dyn.begin(), dyn.end())) {
      throw ValidationError("iterative mode must predict every non-static input variable");
    }
    targets = dyn;
  }
  auto init_rng = stream(cfg.seed, 0);
  adapt_vocabulary(m, data.variables(), init_rng);
  match_grid(m, data.grid());

  Splits sp = split_series(data.num_samples(), cfg.split);
  NormStats stats = finetune_stats(data, sp.train, m.norm_stats);
  m.norm_stats = stats;

  Dataset local = data;
  std::optional<TokenWindow> region;
  if (p.mode == FinetuneMode::regional) {
    const auto& w = p.region;
    if (w.size() == 0 || w.row0 + w.rows > m.config.token_h() || w.col0 + w.cols > m.config.token_w()) {
      throw ValidationError("region window does not fit the token grid");
    }
    region = w;
    local = crop_dataset(data, window_indices(w, m.config.patch_size));
  }
  Series series = make_series(local, stats);
  ForecastTask task{&series, targets, series.indices_of(targets), lat_weights(series.grid), region};

  std::vector<std::size_t> lead_steps;
  bool one_lead_per_batch = false;
  switch (p.mode) {
    case FinetuneMode::continuous:
      for (double h : lead_lattice(cfg.min_lead_hours, cfg.max_lead_hours, series.step_hours)) {
        lead_steps.push_back(series.lead_steps(h));
      }
      one_lead_per_batch = true;
      break;
    case FinetuneMode::iterative: lead_steps = {series.lead_steps(p.rollout_step_hours)}; break;
    default: lead_steps = {series.lead_steps(p.lead_hours)}; break;
  }

  auto val_rng = stream(cfg.seed, 1);
  auto val_pairs = sample_pairs(sp.val, lead_steps, cfg.val_pairs, val_rng, false);
  auto rng = stream(cfg.seed, 2);
  LoopHooks hooks;
  hooks.train_loss = [&](const Model& model, std::mt19937_64& g) {
    auto pairs = sample_pairs(sp.train, lead_steps, cfg.batch_size, g, one_lead_per_batch);
    return forecast_loss(model, task, pairs, ForwardOptions{true, &g, nullptr});
  };
  hooks.val_loss = [&](const Model& model) { return forecast_val_loss(model, task, val_pairs, cfg.batch_size); };
  TrainResult r = run_loop(std::move(m), cfg, hooks, rng);
  r.persistence_val_loss = persistence_loss(task, val_pairs);
  auto test_rng = stream(cfg.seed, 3);
  auto test_pairs = sample_pairs(sp.test, lead_steps, cfg.max_eval_samples, test_rng, false);
  r.test_loss = forecast_val_loss(r.model, task, test_pairs, cfg.batch_size);

  std::vector<double> leads = p.eval_leads;
  if (leads.empty()) leads = {p.mode == FinetuneMode::iterative ? p.rollout_step_hours : p.lead_hours};
  std::optional<double> roll;
  if (p.mode == FinetuneMode::iterative) roll = p.rollout_step_hours;
  for (double lead : leads) {
    std::string label = to_string(p.mode);
    if (p.mode == FinetuneMode::continuous && (lead < cfg.min_lead_hours || lead > cfg.max_lead_hours)) {
      label += "-extrapolation";
    }
    r.report.append(evaluate_forecast(&r.model, data, stats, targets, {lead}, sp.test.begin, sp.test.end,
                                      Predictor::model, label, cfg.max_eval_samples, roll,
                                      region ? &*region : nullptr));
  }
  return r;
}

Tensor history_batch(const Series& s, const std::vector<std::size_t>& ends, std::size_t history) {
  std::vector<std::size_t> times;
  for (auto k : ends) {
    for (std::size_t q = 0; q < history; ++q) times.push_back(k + 1 - history + q);
  }
  Tensor flat = s.inputs(times);
  return ops::reshape(flat, {ends.size(), history, s.variables.size(), s.grid.height(), s.grid.width()});
}

TrainResult finetune_projection(Model m, const ProtocolSpec& p, const FinetuneData& data, const TrainConfig& cfg) {
  const Dataset& in = data.primary;
  const Dataset& out = data.secondary;
  if (out.num_samples() != in.num_samples() || !(out.grid() == in.grid())) {
    throw ValidationError("projection inputs and responses must share grid and time axis");
  }
  auto targets = resolve_targets(p, out);
  auto init_rng = stream(cfg.seed, 0);
  match_grid(m, in.grid());
  auto fresh = adapt_vocabulary(m, in.variables(), init_rng);
  auto head = add_projection_head(m, targets, init_rng);
  fresh.insert(fresh.end(), head.begin(), head.end());
  if (p.mode == FinetuneMode::projection_frozen) {
    std::set<std::string> trainable(fresh.begin(), fresh.end());
    for (auto& [name, t] : m.params) t.set_requires_grad(trainable.count(name) || is_layer_norm_parameter(name));
  }

  Splits sp = split_series(in.num_samples(), cfg.split);
  std::size_t first = p.history - 1;
  auto clip = [&](Range r) {
    r.begin = std::max(r.begin, first);
    if (r.begin >= r.end) throw ValidationError("history of " + std::to_string(p.history) + " is longer than a split");
    return r;
  };
  Range train = clip(sp.train), val = clip(sp.val), test = clip(sp.test);
  NormStats in_stats = compute_norm_stats(in, sp.train.begin, sp.train.end);
  NormStats out_stats = compute_norm_stats(out, sp.train.begin, sp.train.end);
  Series xs = make_series(in, in_stats);
  Series ys = make_series(out, out_stats);
  NormStats merged = out_stats;
  merged.merge_missing(in_stats);
  merged.merge_missing(m.norm_stats);
  m.norm_stats = merged;
  auto target_idx = ys.indices_of(targets);
  std::vector<double> uniform(in.grid().height(), 1.0);

  auto loss_on = [&](const Model& model, const std::vector<std::size_t>& ends, const ForwardOptions& o) {
    Tensor pred = projection_forward(model, history_batch(xs, ends, p.history), xs.variables, o);
    return lat_mse(pred, ys.fields(ends, target_idx), uniform);
  };
  auto val_ends = evenly_spaced(val.begin, val.end, cfg.val_pairs);
  auto rng = stream(cfg.seed, 2);
  LoopHooks hooks;
  hooks.train_loss = [&](const Model& model, std::mt19937_64& g) {
    std::uniform_int_distribution<std::size_t> pick(train.begin, train.end - 1);
    std::vector<std::size_t> ends;
    for (std::size_t q = 0; q < cfg.batch_size; ++q) ends.push_back(pick(g));
    return loss_on(model, ends, ForwardOptions{true, &g, nullptr});
  };
  hooks.val_loss = [&](const Model& model) {
    NoGradGuard guard;
    return batched_mean(val_ends.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
      std::vector<std::size_t> chunk(val_ends.begin() + static_cast<std::ptrdiff_t>(b),
                                     val_ends.begin() + static_cast<std::ptrdiff_t>(e));
      return loss_on(model, chunk, {}).item();
    });
  };
  TrainResult r = run_loop(std::move(m), cfg, hooks, rng);

  NoGradGuard guard;
  auto test_ends = evenly_spaced(test.begin, test.end, cfg.max_eval_samples);
  r.test_loss = batched_mean(test_ends.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
    std::vector<std::size_t> chunk(test_ends.begin() + static_cast<std::ptrdiff_t>(b),
                                   test_ends.begin() + static_cast<std::ptrdiff_t>(e));
    return loss_on(r.model, chunk, {}).item();
  });
  Tensor pred = projection_forward(r.model, history_batch(xs, test_ends, p.history), xs.variables);
  Tensor truth = ys.fields(test_ends, target_idx);
  auto w = lat_weights(in.grid());
  FieldShape shape{test_ends.size(), in.grid().height(), in.grid().width()};
  std::string label = to_string(p.mode);
  for (std::size_t v = 0; v < targets.size(); ++v) {
    const auto& st = out_stats.at(targets[v]);
    auto pv = denormalized(pred, v, targets.size(), st);
    auto tv = denormalized(truth, v, targets.size(), st);
    double s = nrmse_spatial(pv, tv, shape, w), g = nrmse_global(pv, tv, shape, w);
    r.report.add(label, targets[v], 0.0, "nrmse_s", s);
    r.report.add(label, targets[v], 0.0, "nrmse_g", g);
    r.report.add(label, targets[v], 0.0, "trmse", trmse(s, g));
    r.report.add(label, targets[v], 0.0, "rmse", lat_rmse(pv, tv, shape, w));
  }
  return r;
}

TrainResult finetune_downscale(Model m, const ProtocolSpec& p, const FinetuneData& data, const TrainConfig& cfg) {
  const Dataset& coarse = data.primary;
  const Dataset& fine = data.secondary;
  if (coarse.num_samples() != fine.num_samples() || coarse.start_hours() != fine.start_hours() ||
      coarse.step_hours() != fine.step_hours()) {
    throw ValidationError("downscaling input and target must share a time axis");
  }
  auto targets = resolve_targets(p, fine);
  Dataset up = regrid_dataset(coarse, fine.grid());
  auto init_rng = stream(cfg.seed, 0);
  match_grid(m, fine.grid());
  auto vocab = up.variables();
  vocab.insert(vocab.end(), targets.begin(), targets.end());
  adapt_vocabulary(m, vocab, init_rng);

  Splits sp = split_series(fine.num_samples(), cfg.split);
  NormStats in_stats = compute_norm_stats(up, sp.train.begin, sp.train.end);
  NormStats out_stats = compute_norm_stats(fine, sp.train.begin, sp.train.end);
  Series xs = make_series(up, in_stats);
  Series ys = make_series(fine, out_stats);
  NormStats merged = out_stats;
  merged.merge_missing(m.norm_stats);
  m.norm_stats = merged;
  auto target_idx = ys.indices_of(targets);
  auto w = lat_weights(fine.grid());

  auto loss_on = [&](const Model& model, const std::vector<std::size_t>& times, const ForwardOptions& o) {
    std::vector<double> leads(times.size(), kDownscaleLeadHours);
    Tensor pred = forward(model, xs.inputs(times), xs.variables, leads, targets, o);
    return lat_mse(pred, ys.fields(times, target_idx), w);
  };
  auto val_times = evenly_spaced(sp.val.begin, sp.val.end, cfg.val_pairs);
  auto rng = stream(cfg.seed, 2);
  LoopHooks hooks;
  hooks.train_loss = [&](const Model& model, std::mt19937_64& g) {
    std::uniform_int_distribution<std::size_t> pick(sp.train.begin, sp.train.end - 1);
    std::vector<std::size_t> times;
    for (std::size_t q = 0; q < cfg.batch_size; ++q) times.push_back(pick(g));
    return loss_on(model, times, ForwardOptions{true, &g, nullptr});
  };
  hooks.val_loss = [&](const Model& model) {
    NoGradGuard guard;
    return batched_mean(val_times.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
      std::vector<std::size_t> chunk(val_times.begin() + static_cast<std::ptrdiff_t>(b),
                                     val_times.begin() + static_cast<std::ptrdiff_t>(e));
      return loss_on(model, chunk, {}).item();
    });
  };
  TrainResult r = run_loop(std::move(m), cfg, hooks, rng);

  NoGradGuard guard;
  auto test_times = evenly_spaced(sp.test.begin, sp.test.end, cfg.max_eval_samples);
  r.test_loss = batched_mean(test_times.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
    std::vector<std::size_t> chunk(test_times.begin() + static_cast<std::ptrdiff_t>(b),
                                   test_times.begin() + static_cast<std::ptrdiff_t>(e));
    return loss_on(r.model, chunk, {}).item();
  });
  std::vector<double> leads(test_times.size(), kDownscaleLeadHours);
  Tensor pred = forward(r.model, xs.inputs(test_times), xs.variables, leads, targets);
  Tensor truth = ys.fields(test_times, target_idx);
  FieldShape shape{test_times.size(), fine.grid().height(), fine.grid().width()};
  for (std::size_t v = 0; v < targets.size(); ++v) {
    const auto& st = out_stats.at(targets[v]);
    auto pv = denormalized(pred, v, targets.size(), st);
    auto tv = denormalized(truth, v, targets.size(), st);
    r.report.add("downscale", targets[v], 0.0, "rmse", lat_rmse(pv, tv, shape, w));
    r.report.add("downscale", targets[v], 0.0, "pearson", pearson(pv, tv));
    r.report.add("downscale", targets[v], 0.0, "mean_bias", mean_bias(pv, tv));
  }
  return r;
}

}  // namespace

TrainResult pretrain(ModelConfig config, const std::vector<Dataset>& sources, const TrainConfig& cfg) {
  cfg.validate();
  if (sources.empty()) throw ValidationError("pretraining needs at least one source");
  const GridSpec& grid = sources.front().grid();
  for (const auto& s : sources) {
    if (!(s.grid() == grid)) throw ValidationError("pretraining sources must share one grid");
    if (s.dynamic_variables().empty()) throw ValidationError("a pretraining source has no dynamic variables");
  }
  if (config.variables.empty()) {
    for (const auto& s : sources) {
      for (const auto& v : s.variables()) {
        if (std::find(config.variables.begin(), config.variables.end(), v) == config.variables.end()) {
          config.variables.push_back(v);
        }
      }
    }
  }
  for (const auto& s : sources) {
    for (const auto& v : s.variables()) {
      if (std::find(config.variables.begin(), config.variables.end(), v) == config.variables.end()) {
        throw ValidationError("source variable '" + v + "' is not in the model vocabulary");
      }
    }
  }
  config.grid_h = grid.height();
  config.grid_w = grid.width();
  Model model = init_model(config, stream(cfg.seed, 0)());

  std::vector<Splits> splits;
  std::vector<Series> series;
  std::vector<std::vector<std::size_t>> lead_steps;
  for (const auto& s : sources) {
    splits.push_back(split_series(s.num_samples(), cfg.split));
    NormStats st = compute_norm_stats(s, splits.back().train.begin, splits.back().train.end);
    model.norm_stats.merge_missing(st);
    series.push_back(make_series(s, st));
    std::vector<std::size_t> ks;
    for (double h : lead_lattice(cfg.min_lead_hours, cfg.max_lead_hours, s.step_hours())) {
      ks.push_back(series.back().lead_steps(h));
    }
    lead_steps.push_back(std::move(ks));
  }
  auto weights = lat_weights(grid);
  std::vector<ForecastTask> tasks;
  std::vector<std::vector<Pair>> val_pairs;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    auto dyn = sources[i].dynamic_variables();
    tasks.push_back({&series[i], dyn, series[i].indices_of(dyn), weights, std::nullopt});
    auto val_rng = stream(cfg.seed, 100 + i);
    val_pairs.push_back(sample_pairs(splits[i].val, lead_steps[i], cfg.val_pairs, val_rng, false));
  }

  std::size_t turn = 0;
  LoopHooks hooks;
  hooks.train_loss = [&](const Model& m, std::mt19937_64& g) {
    std::size_t i = turn++ % sources.size();
    auto pairs = sample_pairs(splits[i].train, lead_steps[i], cfg.batch_size, g, false);
    return forecast_loss(m, tasks[i], pairs, ForwardOptions{true, &g, nullptr});
  };
  hooks.val_loss = [&](const Model& m) {
    double total = 0.0;
    for (std::size_t i = 0; i < sources.size(); ++i) total += forecast_val_loss(m, tasks[i], val_pairs[i], cfg.batch_size);
    return total / static_cast<double>(sources.size());
  };
  auto rng = stream(cfg.seed, 2);
  TrainResult r = run_loop(std::move(model), cfg, hooks, rng);
  double persistence = 0.0;
  for (std::size_t i = 0; i < sources.size(); ++i) persistence += persistence_loss(tasks[i], val_pairs[i]);
  r.persistence_val_loss = persistence / static_cast<double>(sources.size());
  return r;
}

TrainResult finetune(Model init, const ProtocolSpec& protocol, const FinetuneData& data, const TrainConfig& cfg) {
  protocol.validate();
  cfg.validate();
  init.params = init.params.clone();  // copies of a Model share tensors
  switch (protocol.mode) {
    case FinetuneMode::projection_frozen:
    case FinetuneMode::projection_full: return finetune_projection(std::move(init), protocol, data, cfg);
    case FinetuneMode::downscale: return finetune_downscale(std::move(init), protocol, data, cfg);
    default: return finetune_forecast(std::move(init), protocol, data.primary, cfg);
  }
}

RolloutResult rollout(const Model& m, const Tensor& x0, const std::vector<std::string>& variables,
                      const std::vector<std::string>& statics, double horizon_hours, double step_hours) {
  if (!(step_hours > 0.0) || !(horizon_hours > 0.0)) throw ValidationError("rollout horizon and step must be positive");
  double ratio = horizon_hours / step_hours;
  if (std::abs(ratio - std::round(ratio)) > 1e-9) {
    throw ValidationError("horizon " + std::to_string(horizon_hours) + " h is not a multiple of the " +
                          std::to_string(step_hours) + " h step");
  }
  auto steps = static_cast<std::size_t>(std::llround(ratio));
  std::vector<std::size_t> dyn_idx, static_idx;
  RolloutResult r;
  for (std::size_t v = 0; v < variables.size(); ++v) {
    if (std::find(statics.begin(), statics.end(), variables[v]) != statics.end()) {
      static_idx.push_back(v);
    } else {
      dyn_idx.push_back(v);
      r.variables.push_back(variables[v]);
    }
  }
  if (r.variables.empty()) throw ValidationError("rollout needs at least one dynamic variable");
  // Input order: dynamic variables, then statics taken verbatim from x0.
  std::vector<std::string> order = r.variables;
  for (auto s : static_idx) order.push_back(variables[s]);
  Tensor fixed = static_idx.empty() ? Tensor{} : ops::index_select(x0, 1, static_idx);
  Tensor state = ops::index_select(x0, 1, dyn_idx);
  std::vector<double> leads(x0.dim(0), step_hours);
  for (std::size_t k = 0; k < steps; ++k) {
    Tensor input = fixed.defined() ? ops::concat({state, fixed}, 1) : state;
    state = forward(m, input, order, leads, r.variables);
    ++r.forward_calls;
    r.states.push_back(state);
  }
  return r;
}

MetricReport evaluate_forecast(const Model* model, const Dataset& data, const NormStats& stats,
                               const std::vector<std::string>& targets, const std::vector<double>& leads,
                               std::size_t begin, std::size_t end, Predictor predictor, const std::string& task,
                               std::size_t max_samples, std::optional<double> rollout_step_hours,
                               const TokenWindow* region) {
  if (predictor == Predictor::model && model == nullptr) throw ValidationError("model predictor needs a checkpoint");
  if (begin >= end || end > data.num_samples()) throw ValidationError("evaluation range is empty or out of bounds");
  if (region && !model) throw ValidationError("regional evaluation needs a model");
  Dataset local = region ? crop_dataset(data, window_indices(*region, model->config.patch_size)) : data;
  Series s = make_series(local, stats);
  auto target_idx = s.indices_of(targets);
  auto w = lat_weights(s.grid);
  MetricReport report;
  NoGradGuard guard;
  for (double lead : leads) {
    std::size_t k = s.lead_steps(lead);
    if (end - begin <= k) {
      throw ValidationError("evaluation range of " + std::to_string(end - begin) + " samples is too short for lead " +
                            std::to_string(lead) + " h");
    }
    auto times = evenly_spaced(begin, end - k, max_samples);
    std::vector<std::vector<double>> pred(targets.size()), truth(targets.size());
    const std::size_t chunk = 16;
    for (std::size_t b = 0; b < times.size(); b += chunk) {
      std::vector<std::size_t> t0(times.begin() + static_cast<std::ptrdiff_t>(b),
                                  times.begin() + static_cast<std::ptrdiff_t>(std::min(times.size(), b + chunk)));
      std::vector<std::size_t> t1;
      for (auto t : t0) t1.push_back(t + k);
      Tensor y = s.fields(t1, target_idx);
      Tensor p;
      switch (predictor) {
        case Predictor::oracle: p = y; break;
        case Predictor::persistence: p = s.fields(t0, target_idx); break;
        case Predictor::model: {
          std::vector<double> lt(t0.size(), lead);
          if (rollout_step_hours) {
            auto roll = rollout(*model, s.inputs(t0), s.variables, s.statics, lead, *rollout_step_hours);
            std::vector<std::size_t> pick;
            for (const auto& name : targets) {
              pick.push_back(static_cast<std::size_t>(
                  std::find(roll.variables.begin(), roll.variables.end(), name) - roll.variables.begin()));
            }
            p = ops::index_select(roll.states.back(), 1, pick);
          } else if (region) {
            p = forward_token_subset(*model, s.inputs(t0), s.variables, lt, targets, *region);
          } else {
            p = forward(*model, s.inputs(t0), s.variables, lt, targets);
          }
          break;
        }
      }
      for (std::size_t v = 0; v < targets.size(); ++v) {
        const auto& st = stats.at(targets[v]);
        auto pv = denormalized(p, v, targets.size(), st);
        auto tv = denormalized(y, v, targets.size(), st);
        pred[v].insert(pred[v].end(), pv.begin(), pv.end());
        truth[v].insert(truth[v].end(), tv.begin(), tv.end());
      }
    }
    FieldShape shape{times.size(), s.grid.height(), s.grid.width()};
    for (std::size_t v = 0; v < targets.size(); ++v) {
      report.add(task, targets[v], lead, "rmse", lat_rmse(pred[v], truth[v], shape, w));
      try {
        report.add(task, targets[v], lead, "acc", acc(pred[v], truth[v], climatology(truth[v], shape), shape, w));
      } catch (const NumericError&) {
        // Undefined for fields without anomalies; the row is omitted.
      }
    }
  }
  return report;
}

}  // namespace gridformer
