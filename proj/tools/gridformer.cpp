// gridformer: data generation, training, finetuning and evaluation from the shell.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gridformer/error.hpp"
#include "gridformer/gtb.hpp"
#include "gridformer/metrics.hpp"
#include "gridformer/model.hpp"
#include "gridformer/synth.hpp"
#include "gridformer/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gridformer;

namespace {

constexpr double kGradcheckThreshold = 1e-4;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  // command-specific values, written into the config section when given
  std::vector<std::pair<std::string, json>> sets;
};

json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
}

void set_dotted(json& root, const std::string& key, json value) {
  if (key.empty()) throw ValidationError("empty override key");
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    auto dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("malformed key '" + key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

json resolve(const Flags& f) {
  json cfg = f.config.empty() ? json::object() : read_config(f.config);
  for (const auto& [key, value] : f.sets) set_dotted(cfg, key, value);
  if (f.seed) cfg["seed"] = *f.seed;
  if (!f.out.empty()) cfg["out"] = f.out;
  for (const auto& o : f.overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("override '" + o + "' is not key=value");
    set_dotted(cfg, o.substr(0, eq), parse_value(o.substr(eq + 1)));
  }
  if (!cfg.contains("seed")) cfg["seed"] = 0;
  return cfg;
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config key '" + key + "': " + e.what());
  }
}

json section(const json& cfg, const std::string& name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

std::string required_path(const json& sec, const std::string& section_name, const std::string& key) {
  auto v = get_or<std::string>(sec, key, "");
  if (v.empty()) throw ValidationError(section_name + "." + key + " is required");
  return v;
}

fs::path prepare_run_dir(const json& cfg) {
  auto out = get_or<std::string>(cfg, "out", "");
  if (out.empty()) throw ValidationError("--out is required");
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "config.json") << cfg.dump(2) << '\n';
  return out;
}

void check_threads_env() {
  const char* v = std::getenv("GRIDFORMER_THREADS");
  if (!v) return;
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) throw ValidationError("GRIDFORMER_THREADS must be a positive integer");
}

Precision precision_of(const json& cfg) {
  auto p = get_or<std::string>(cfg, "precision", "f32");
  if (p == "f32") return Precision::f32;
  if (p == "f64") return Precision::f64;
  throw ValidationError("precision must be f32 or f64");
}

ModelConfig model_config(const json& cfg) {
  try {
    return section(cfg, "model").get<ModelConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
}

std::uint64_t seed_of(const json& cfg) { return cfg.at("seed").get<std::uint64_t>(); }

// ---- data commands ----

int cmd_gen_data(const json& cfg) {
  auto sec = section(cfg, "gen-data");
  auto datasets = get_or<json>(sec, "datasets", json::array());
  if (!datasets.is_array() || datasets.empty()) throw ValidationError("gen-data.datasets must list at least one dataset");
  auto out = prepare_run_dir(cfg);
  std::uint64_t seed = seed_of(cfg);
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto& d = datasets[i];
    auto name = get_or<std::string>(d, "name", "data" + std::to_string(i));
    SynthSpec spec;
    if (d.contains("spec")) {
      spec = d["spec"].get<SynthSpec>();
    } else {
      spec = make_family(get_or<FamilyOptions>(d, "family", FamilyOptions{}), get_or<std::uint64_t>(d, "family_seed", i));
    }
    Dataset data = generate_synthetic(spec, seed * 1000 + i);
    write_dataset(out / (name + ".gtb"), data);
    std::cout << "wrote " << (out / (name + ".gtb")).string() << " (" << data.num_samples() << " samples, "
              << data.num_variables() << " variables)\n";
  }
  return 0;
}

int cmd_regrid(const json& cfg) {
  auto sec = section(cfg, "regrid");
  Dataset in = read_dataset(required_path(sec, "regrid", "input"));
  auto h = get_or<std::size_t>(sec, "height", 0), w = get_or<std::size_t>(sec, "width", 0);
  if (h == 0 || w == 0) throw ValidationError("regrid.height and regrid.width must be positive");
  auto out = prepare_run_dir(cfg);
  write_dataset(out / "data.gtb", regrid_dataset(in, GridSpec::global(h, w)));
  return 0;
}

int cmd_crop(const json& cfg) {
  auto sec = section(cfg, "crop");
  Dataset in = read_dataset(required_path(sec, "crop", "input"));
  Dataset cropped = crop_dataset(in, get_or<double>(sec, "lat_min", -90), get_or<double>(sec, "lat_max", 90),
                                 get_or<double>(sec, "lon_min", 0), get_or<double>(sec, "lon_max", 360));
  auto out = prepare_run_dir(cfg);
  write_dataset(out / "data.gtb", cropped);
  std::cout << "cropped to " << cropped.grid().height() << "x" << cropped.grid().width() << "\n";
  return 0;
}

int cmd_s2s_build(const json& cfg) {
  auto sec = section(cfg, "s2s-build");
  Dataset in = read_dataset(required_path(sec, "s2s-build", "input"));
  auto pairs = build_s2s_targets(in, get_or<std::int64_t>(sec, "lead_hours", 336), get_or<std::int64_t>(sec, "window_hours", 336));
  auto out = prepare_run_dir(cfg);
  write_dataset(out / "inputs.gtb", pairs.inputs);
  write_dataset(out / "targets.gtb", pairs.targets);
  std::cout << pairs.inputs.num_samples() << " pairs, " << pairs.skipped << " skipped\n";
  return 0;
}

// ---- training commands ----

std::vector<Dataset> read_all(const std::vector<std::string>& paths) {
  std::vector<Dataset> out;
  for (const auto& p : paths) out.push_back(read_dataset(p));
  return out;
}

void write_run(const fs::path& out, const TrainResult& r, const json& extra) {
  write_step_log(out / "step_log.csv", r.log);
  r.report.write(out);
  save_checkpoint(out / "checkpoint.gtb", r.model, extra);
}

int cmd_pretrain(const json& cfg) {
  auto sec = section(cfg, "pretrain");
  auto paths = get_or<std::vector<std::string>>(sec, "data", {});
  if (paths.empty()) throw ValidationError("pretrain.data must list at least one dataset");
  auto train = get_or<TrainConfig>(sec, "train", TrainConfig{});
  train.seed = seed_of(cfg);
  auto sources = read_all(paths);
  auto out = prepare_run_dir(cfg);
  TrainResult r = pretrain(model_config(cfg), sources, train);
  r.report.add("pretrain", "all", 0, "val_lat_mse", r.best_val_loss);
  r.report.add("pretrain", "all", 0, "persistence_val_lat_mse", r.persistence_val_loss);
  write_run(out, r,
            {{"kind", "pretrain"}, {"best_step", r.best_step}, {"steps_run", r.steps_run},
             {"early_stopped", r.early_stopped}});
  std::cout << "best validation lat-MSE " << r.best_val_loss << " at step " << r.best_step << " (persistence "
            << r.persistence_val_loss << ")\n";
  return 0;
}

int run_finetune(const json& cfg, const std::string& name, std::optional<FinetuneMode> forced) {
  auto sec = section(cfg, name);
  ProtocolSpec protocol = get_or<ProtocolSpec>(sec, "protocol", ProtocolSpec{});
  if (forced) protocol.mode = *forced;
  if (name == "project" && protocol.mode != FinetuneMode::projection_frozen &&
      protocol.mode != FinetuneMode::projection_full) {
    protocol.mode = FinetuneMode::projection_frozen;
  }
  json train_json = finetune_train_config(protocol.mode, get_or<double>(sec, "lr_scale", kDefaultLrScale));
  train_json.merge_patch(get_or<json>(sec, "train", json::object()));
  TrainConfig train = train_json.get<TrainConfig>();
  train.seed = seed_of(cfg);

  Model init = load_checkpoint(required_path(sec, name, "checkpoint"));
  FinetuneData data;
  data.primary = read_dataset(required_path(sec, name, "data"));
  bool paired = protocol.mode == FinetuneMode::downscale || protocol.mode == FinetuneMode::projection_frozen ||
                protocol.mode == FinetuneMode::projection_full;
  if (paired) data.secondary = read_dataset(required_path(sec, name, "secondary"));

  // Echo what actually runs.
  json resolved = cfg;
  resolved[name]["protocol"] = protocol;
  resolved[name]["train"] = train;
  auto out = prepare_run_dir(resolved);
  TrainResult r = finetune(std::move(init), protocol, data, train);
  r.report.add(to_string(protocol.mode), "all", 0, "val_lat_mse", r.best_val_loss);
  r.report.add(to_string(protocol.mode), "all", 0, "test_lat_mse", r.test_loss);
  write_run(out, r, {{"kind", "finetune"}, {"mode", to_string(protocol.mode)}, {"best_step", r.best_step}});
  std::cout << to_string(protocol.mode) << ": best validation loss " << r.best_val_loss << ", test loss "
            << r.test_loss << "\n";
  return 0;
}

int cmd_evaluate(const json& cfg) {
  auto sec = section(cfg, "evaluate");
  Predictor predictor = predictor_from_string(get_or<std::string>(sec, "predictor", "model"));
  Dataset data = read_dataset(required_path(sec, "evaluate", "data"));
  std::optional<Model> model;
  auto ckpt = get_or<std::string>(sec, "checkpoint", "");
  if (!ckpt.empty()) model = load_checkpoint(ckpt);
  NormStats stats = model ? model->norm_stats : compute_norm_stats(data);
  stats.merge_missing(compute_norm_stats(data));
  auto targets = get_or<std::vector<std::string>>(sec, "targets", data.dynamic_variables());
  auto leads = get_or<std::vector<double>>(sec, "leads", {6.0});
  auto begin = get_or<std::size_t>(sec, "begin", 0);
  auto end = get_or<std::size_t>(sec, "end", data.num_samples());
  std::optional<double> roll;
  if (sec.contains("rollout_step_hours")) roll = sec["rollout_step_hours"].get<double>();
  auto out = prepare_run_dir(cfg);
  MetricReport report =
      evaluate_forecast(model ? &*model : nullptr, data, stats, targets, leads, begin, end, predictor,
                        get_or<std::string>(sec, "task", "forecast"), get_or<std::size_t>(sec, "max_samples", 256), roll);
  report.write(out);
  std::cout << report.to_csv();
  return 0;
}

int cmd_rollout(const json& cfg) {
  auto sec = section(cfg, "rollout");
  Model model = load_checkpoint(required_path(sec, "rollout", "checkpoint"));
  Dataset data = read_dataset(required_path(sec, "rollout", "data"));
  auto index = get_or<std::size_t>(sec, "index", 0);
  double horizon = get_or<double>(sec, "horizon_hours", 168.0), step = get_or<double>(sec, "step_hours", 6.0);
  if (index >= data.num_samples()) throw ValidationError("rollout.index is outside the series");
  NormStats stats = model.norm_stats;
  auto sample = data.sample(index);
  normalize(sample, stats);
  std::vector<double> x0(sample.values.begin(), sample.values.end());
  Tensor x = Tensor::from({1, data.num_variables(), data.grid().height(), data.grid().width()}, std::move(x0));
  auto out = prepare_run_dir(cfg);
  RolloutResult r;
  {
    NoGradGuard guard;
    r = rollout(model, x, data.variables(), data.static_variables(), horizon, step);
  }
  std::vector<float> values;
  MetricReport report;
  auto w = lat_weights(data.grid());
  std::size_t cells = data.grid().cells();
  for (std::size_t k = 0; k < r.states.size(); ++k) {
    double lead = step * static_cast<double>(k + 1);
    auto truth_t = static_cast<double>(data.time_at(index)) + lead;
    std::optional<std::size_t> truth_index;
    double offset = (truth_t - static_cast<double>(data.start_hours())) / static_cast<double>(data.step_hours());
    if (std::abs(offset - std::round(offset)) < 1e-9 && std::round(offset) < static_cast<double>(data.num_samples())) {
      truth_index = static_cast<std::size_t>(std::llround(offset));
    }
    for (std::size_t v = 0; v < r.variables.size(); ++v) {
      const auto& st = stats.at(r.variables[v]);
      std::vector<double> pred(cells);
      for (std::size_t c = 0; c < cells; ++c) {
        pred[c] = r.states[k].at(v * cells + c) * st.std + st.mean;
        values.push_back(static_cast<float>(pred[c]));
      }
      if (truth_index) {
        auto f = data.field(*truth_index, data.variable_index(r.variables[v]));
        std::vector<double> truth(f.begin(), f.end());
        report.add("rollout", r.variables[v], lead, "rmse",
                   lat_rmse(pred, truth, {1, data.grid().height(), data.grid().width()}, w));
      }
    }
  }
  Dataset traj(data.grid(), r.variables, data.time_at(index) + static_cast<std::int64_t>(std::llround(step)),
               static_cast<std::int64_t>(std::llround(step)), std::move(values));
  write_dataset(out / "trajectory.gtb", traj);
  report.write(out);
  std::cout << r.forward_calls << " forward passes\n";
  return 0;
}

int cmd_gradcheck(const json& cfg) {
  ModelConfig c = model_config(cfg);
  if (c.variables.empty()) c.variables = {"var0", "var1"};
  Model m = init_model(c, seed_of(cfg));
  if (cfg.contains("out")) prepare_run_dir(cfg);
  auto r = model_gradient_check(m, seed_of(cfg) + 1);
  std::cout << "max relative error " << r.max_relative_error << " (" << r.worst_parameter << ", " << r.evaluations
            << " evaluations)\n";
  bool ok = r.max_relative_error < kGradcheckThreshold;
  std::cout << (ok ? "PASS" : "FAIL") << " threshold " << kGradcheckThreshold << "\n";
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridformer: a ClimaX-style gridded weather and climate foundation model"};
  app.require_subcommand(1);
  Flags flags;
  std::string command;
  std::function<int(const json&)> run;

  auto add = [&](const std::string& name, const std::string& help, std::function<int(const json&)> fn) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "seed for every random stream");
    sub->add_option("--out", flags.out, "run directory");
    sub->add_option("--override", flags.overrides, "dotted.key=value, repeatable")->take_all();
    sub->callback([&, name, fn] {
      command = name;
      run = fn;
    });
    return sub;
  };
  // Flags that fill a config key; applied only when given.
  auto bind = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help,
                  bool many = false) {
    sub->add_option_function<std::vector<std::string>>(
           flag,
           [&flags, key, many](const std::vector<std::string>& v) {
             if (many) {
               flags.sets.emplace_back(key, json(v));
             } else {
               flags.sets.emplace_back(key, parse_value(v.back()));
             }
           },
           help)
        ->expected(1, many ? CLI::detail::expected_max_vector_size : 1);
  };

  add("gen-data", "generate synthetic datasets", cmd_gen_data);
  auto regrid = add("regrid", "bilinear regrid to a global grid", cmd_regrid);
  bind(regrid, "--input", "regrid.input", "input dataset");
  bind(regrid, "--height", "regrid.height", "target rows");
  bind(regrid, "--width", "regrid.width", "target columns");
  auto crop = add("crop", "crop to a lat/lon box", cmd_crop);
  bind(crop, "--input", "crop.input", "input dataset");
  bind(crop, "--lat-min", "crop.lat_min", "southern bound");
  bind(crop, "--lat-max", "crop.lat_max", "northern bound");
  bind(crop, "--lon-min", "crop.lon_min", "western bound");
  bind(crop, "--lon-max", "crop.lon_max", "eastern bound");
  auto s2s = add("s2s-build", "build sub-seasonal averaged targets", cmd_s2s_build);
  bind(s2s, "--input", "s2s-build.input", "input dataset");
  bind(s2s, "--lead-hours", "s2s-build.lead_hours", "lead before the averaging window");
  bind(s2s, "--window-hours", "s2s-build.window_hours", "averaging window");
  auto pre = add("pretrain", "multi-source pretraining", cmd_pretrain);
  bind(pre, "--data", "pretrain.data", "source datasets", true);
  auto ft = add("finetune", "finetune a checkpoint", [](const json& c) { return run_finetune(c, "finetune", {}); });
  bind(ft, "--checkpoint", "finetune.checkpoint", "checkpoint to start from");
  bind(ft, "--data", "finetune.data", "dataset");
  bind(ft, "--secondary", "finetune.secondary", "paired dataset (projection responses, downscale targets)");
  bind(ft, "--mode", "finetune.protocol.mode", "protocol mode");
  auto ev = add("evaluate", "forecast metrics for a checkpoint or baseline", cmd_evaluate);
  bind(ev, "--checkpoint", "evaluate.checkpoint", "checkpoint");
  bind(ev, "--data", "evaluate.data", "dataset");
  bind(ev, "--predictor", "evaluate.predictor", "model, persistence or oracle");
  auto ro = add("rollout", "iterative rollout from one sample", cmd_rollout);
  bind(ro, "--checkpoint", "rollout.checkpoint", "checkpoint");
  bind(ro, "--data", "rollout.data", "dataset");
  bind(ro, "--index", "rollout.index", "start sample");
  bind(ro, "--horizon-hours", "rollout.horizon_hours", "horizon");
  auto ds = add("downscale", "finetune for downscaling",
                [](const json& c) { return run_finetune(c, "downscale", FinetuneMode::downscale); });
  bind(ds, "--checkpoint", "downscale.checkpoint", "checkpoint");
  bind(ds, "--coarse", "downscale.data", "coarse input dataset");
  bind(ds, "--fine", "downscale.secondary", "fine target dataset");
  auto pj = add("project", "climate projection finetuning", [](const json& c) { return run_finetune(c, "project", {}); });
  bind(pj, "--checkpoint", "project.checkpoint", "checkpoint");
  bind(pj, "--inputs", "project.data", "forcing inputs dataset");
  bind(pj, "--responses", "project.secondary", "response dataset");
  bind(pj, "--mode", "project.protocol.mode", "projection_frozen or projection_full");
  add("gradcheck", "gradient check of the configured model", cmd_gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    check_threads_env();
    json cfg = resolve(flags);
    PrecisionScope precision(precision_of(cfg));
    return run(cfg);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
