// Acceptance suite: one PASS/FAIL line per criterion.
// usage: gridformer_acceptance <toy config> [gridformer binary]
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

#include <unistd.h>

#include "gridformer/gtb.hpp"
#include "gridformer/metrics.hpp"
#include "gridformer/model.hpp"
#include "gridformer/synth.hpp"
#include "gridformer/training.hpp"
#include "json.hpp"
#include "metric_oracles.hpp"

namespace fs = std::filesystem;
using namespace gridformer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

struct Toy {
  ModelConfig model;
  TrainConfig pretrain;
  FamilyOptions family;
  double lr_scale = kDefaultLrScale;
};

Toy load_toy(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, true, true);
  Toy t;
  t.model = j.at("model").get<ModelConfig>();
  t.model.variables.clear();
  t.pretrain = j.at("pretrain").at("train").get<TrainConfig>();
  t.family = j.at("gen-data").at("datasets").at(0).at("family").get<FamilyOptions>();
  t.lr_scale = j.at("finetune").value("lr_scale", kDefaultLrScale);
  return t;
}

Dataset family_data(const Toy& toy, std::uint64_t family_seed, double noise = 0.0) {
  FamilyOptions o = toy.family;
  o.noise_sigma = noise;
  return generate_synthetic(make_family(o, family_seed), family_seed);
}

ModelConfig toy_model(const Toy& toy, std::vector<std::string> vars) {
  ModelConfig c = toy.model;
  c.variables = std::move(vars);
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

// Shared pretrained models, keyed by seed, on families 10*seed + {1, 2, 3}.
std::map<std::uint64_t, TrainResult> g_pretrained;

const TrainResult& pretrained(const Toy& toy, std::uint64_t seed) {
  auto it = g_pretrained.find(seed);
  if (it != g_pretrained.end()) return it->second;
  TrainConfig t = toy.pretrain;
  t.seed = seed;
  std::vector<Dataset> sources{family_data(toy, 10 * seed + 1), family_data(toy, 10 * seed + 2),
                               family_data(toy, 10 * seed + 3)};
  return g_pretrained.emplace(seed, pretrain(toy.model, sources, t)).first->second;
}

Outcome gradient_fidelity(const Toy& toy) {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig c = toy_model(toy, {"t850", "z500"});
  c.grid_h = 8;
  c.grid_w = 16;
  auto r = model_gradient_check(init_model(c, 1), 2);
  double secs = seconds_since(t0);
  return {r.max_relative_error < 1e-5 && secs < 60.0,
          "max relative error " + fmt(r.max_relative_error) + " in " + fmt(secs) + " s"};
}

Outcome architecture_invariants(const Toy& toy) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  auto random = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = normal(rng);
    return Tensor::from(std::move(s), std::move(v));
  };
  std::vector<std::string> fails;
  for (std::size_t nv : {1u, 3u, 48u}) {
    std::vector<std::string> vars;
    for (std::size_t i = 0; i < nv; ++i) vars.push_back("v" + std::to_string(i));
    ModelConfig c = toy_model(toy, vars);
    Model m = init_model(c, nv);
    ForwardTrace trace;
    std::vector<double> lead{72.0};
    forward(m, random({1, nv, c.grid_h, c.grid_w}), vars, lead, {vars[0]}, {false, nullptr, &trace});
    if (trace.backbone_sequence_length != c.token_h() * c.token_w()) fails.push_back("sequence length V=" + std::to_string(nv));
  }

  ModelConfig c = toy_model(toy, {"a", "b", "c", "d"});
  Model m = init_model(c, 5);
  Tensor x = random({2, 4, c.grid_h, c.grid_w});
  std::vector<double> lead{6.0, 120.0};
  std::vector<std::string> targets{"a", "c"};
  Tensor base = forward(m, x, c.variables, lead, targets);
  std::vector<std::size_t> order{2, 0, 3, 1};
  std::vector<std::string> permuted{"c", "a", "d", "b"};
  Tensor moved = forward(m, ops::index_select(x, 1, order), permuted, lead, targets);
  double diff = 0.0;
  for (std::size_t i = 0; i < base.numel(); ++i) diff = std::max(diff, std::abs(base.at(i) - moved.at(i)));
  if (diff > 1e-5) fails.push_back("permutation " + fmt(diff));

  if (!bit_equal(unpatchify(patchify(x, 2), c.token_h(), c.token_w(), 2), x)) fails.push_back("patchify round trip");
  Tensor subset = forward_token_subset(m, x, c.variables, lead, targets, TokenWindow::full(c));
  if (!bit_equal(subset, base)) fails.push_back("full-window subset");

  std::string detail = fails.empty() ? "permutation max diff " + fmt(diff) : "";
  for (const auto& f : fails) detail += (detail.empty() ? "" : "; ") + f;
  return {fails.empty(), detail};
}

Outcome metric_oracles() {
  PrecisionScope f64(Precision::f64);
  std::mt19937_64 rng(77);
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(b)); };
  std::map<std::string, int> passed;
  const int instances = 50;
  int acc_done = 0;
  for (int k = 0; k < instances; ++k) {
    auto s = oracle::random_series(rng);
    FieldShape f{s.n, s.h, s.w};
    Tensor p = Tensor::from({s.n, s.h, s.w}, s.pred), t = Tensor::from({s.n, s.h, s.w}, s.truth);
    passed["lat_mse"] += close(lat_mse(p, t, s.weights).item(), oracle::lat_mse(s));
    passed["lat_rmse"] += close(lat_rmse(s.pred, s.truth, f, s.weights), oracle::lat_rmse(s));
    passed["nrmse_s"] += close(nrmse_spatial(s.pred, s.truth, f, s.weights), oracle::nrmse_s(s));
    passed["nrmse_g"] += close(nrmse_global(s.pred, s.truth, f, s.weights), oracle::nrmse_g(s));
    passed["mean_bias"] += close(mean_bias(s.pred, s.truth), oracle::mean_bias(s));
    passed["pearson"] += close(pearson(s.pred, s.truth), oracle::pearson(s.pred, s.truth));
  }
  while (acc_done < instances) {
    auto s = oracle::random_series(rng);
    if (s.n < 2) continue;  // a single forecast has no anomaly
    FieldShape f{s.n, s.h, s.w};
    passed["acc"] += close(acc(s.pred, s.truth, climatology(s.truth, f), f, s.weights), oracle::acc(s));
    ++acc_done;
  }
  bool ok = passed.size() == 7;
  std::string detail;
  for (const auto& [name, n] : passed) {
    ok = ok && n == instances;
    detail += (detail.empty() ? "" : ", ") + name + " " + std::to_string(n) + "/" + std::to_string(instances);
  }
  return {ok, detail};
}

Outcome table_arithmetic() {
  double t = trmse(0.086, 0.043);
  auto w = lat_weights(std::vector<double>{60.0, 0.0, -60.0});
  bool weights_ok = std::abs(w[0] - 0.75) < 1e-12 && std::abs(w[1] - 1.5) < 1e-12 && std::abs(w[2] - 0.75) < 1e-12;
  bool trmse_ok = std::abs(t - 0.301) < 1e-12 && std::abs(t - 0.300) <= 0.002;
  return {weights_ok && trmse_ok,
          "trmse " + fmt(t) + ", weights [" + fmt(w[0]) + ", " + fmt(w[1]) + ", " + fmt(w[2]) + "]"};
}

Outcome training_sanity(const Toy& toy) {
  auto t0 = std::chrono::steady_clock::now();
  TrainConfig t = toy.pretrain;
  t.seed = 0;
  auto r = pretrain(toy.model, {family_data(toy, 1)}, t);
  double secs = seconds_since(t0);
  double ratio = r.best_val_loss / r.persistence_val_loss;
  return {ratio < 0.1 && r.steps_run <= 2000 && secs < 600.0,
          "val/persistence " + fmt(ratio) + " after " + std::to_string(r.steps_run) + " steps, " + fmt(secs) + " s"};
}

Outcome transfer(const Toy& toy) {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto& pre = pretrained(toy, seed);
    Dataset held = family_data(toy, 10 * seed + 4);
    ProtocolSpec p;
    p.mode = FinetuneMode::all_vars;
    p.lead_hours = 72;
    TrainConfig ft = finetune_train_config(p.mode, toy.lr_scale);
    ft.batch_size = toy.pretrain.batch_size;
    ft.seed = seed;
    auto tuned = finetune(pre.model, p, {held, {}}, ft);
    // Scratch: same architecture and step budget, pretraining optimizer settings.
    TrainConfig sc = ft;
    sc.optim.peak_lr = toy.pretrain.optim.peak_lr;
    sc.optim.beta2 = toy.pretrain.optim.beta2;
    auto scratch = finetune(init_model(pre.model.config, seed + 99), p, {held, {}}, sc);
    wins += tuned.test_loss < scratch.test_loss;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " " + fmt(tuned.test_loss) +
              " vs " + fmt(scratch.test_loss);
  }
  return {wins >= 2, std::to_string(wins) + "/3 wins (finetuned vs scratch test lat-MSE: " + detail + ")"};
}

Outcome protocol_contracts(const Toy& toy) {
  const Model& base = pretrained(toy, 0).model;
  FamilyOptions o = toy.family;
  o.num_steps = 200;
  o.variables = {"co2", "so2"};
  Dataset forcing = generate_synthetic(make_family(o, 21), 21);
  o.variables = {"tas"};
  Dataset response = generate_synthetic(make_family(o, 22), 22);
  ProtocolSpec proj;
  proj.mode = FinetuneMode::projection_frozen;
  TrainConfig pt = finetune_train_config(proj.mode, toy.lr_scale);
  pt.optim.total_steps = 100;
  pt.batch_size = 4;
  auto frozen = finetune(base, proj, {forcing, response}, pt);
  std::size_t checked = 0, changed = 0, norms_moved = 0;
  for (const auto& [name, t] : base.params) {
    if (name.rfind("head.", 0) == 0) continue;  // forecast head is resized for the new vocabulary
    if (is_layer_norm_parameter(name)) {
      norms_moved += !bit_equal(t, frozen.model.params.at(name));
      continue;
    }
    ++checked;
    changed += !bit_equal(t, frozen.model.params.at(name));
  }
  bool freeze_ok = changed == 0 && checked > 0 && norms_moved > 0;

  Dataset noisy = family_data(toy, 5, 0.3);
  TrainConfig ft = finetune_train_config(FinetuneMode::direct, toy.lr_scale);
  ft.batch_size = toy.pretrain.batch_size;
  ProtocolSpec direct;
  direct.targets = {"t850"};
  direct.lead_hours = 168;
  auto d = finetune(base, direct, {noisy, {}}, ft);
  ProtocolSpec iter;
  iter.mode = FinetuneMode::iterative;
  iter.eval_leads = {168};
  auto it = finetune(base, iter, {noisy, {}}, ft);
  double ed = d.report.value("t850", 168, "rmse"), ei = it.report.value("t850", 168, "rmse");
  return {freeze_ok && ei >= ed, std::to_string(changed) + "/" + std::to_string(checked) +
                                     " frozen parameters changed, " + std::to_string(norms_moved) +
                                     " LayerNorm tensors trained; 168 h RMSE iterative " + fmt(ei) + " vs direct " +
                                     fmt(ed)};
}

bool same_file(const fs::path& a, const fs::path& b) {
  std::ifstream x(a, std::ios::binary), y(b, std::ios::binary);
  std::vector<char> p((std::istreambuf_iterator<char>(x)), {}), q((std::istreambuf_iterator<char>(y)), {});
  return !p.empty() && p == q;
}

Outcome data_pipeline(const Toy& toy, const std::string& cli) {
  std::vector<std::string> fails;
  // Regridding: constant and per-axis-linear fields.
  GridSpec src = GridSpec::global(16, 64);
  auto fill = [](const GridSpec& g, auto f) {
    std::vector<float> v(g.cells());
    for (std::size_t i = 0; i < g.height(); ++i) {
      for (std::size_t j = 0; j < g.width(); ++j) v[i * g.width() + j] = static_cast<float>(f(g.lat(i), g.lon(j)));
    }
    return v;
  };
  double worst = 0.0;
  GridSpec half = GridSpec::global(16, 32);
  auto constant = regrid_bilinear(fill(src, [](double, double) { return 2.5; }), 1, src, GridSpec::global(8, 16));
  for (float v : constant) worst = std::max(worst, std::abs(v - 2.5));
  auto lon_lin = regrid_bilinear(fill(src, [](double, double lon) { return 0.25 * lon; }), 1, src, half);
  for (std::size_t i = 0; i < half.height(); ++i) {
    for (std::size_t j = 0; j < half.width(); ++j) worst = std::max(worst, std::abs(lon_lin[i * 32 + j] - 0.25 * half.lon(j)));
  }
  GridSpec rows = GridSpec::global(12, 64);
  auto lat_lin = regrid_bilinear(fill(src, [](double lat, double) { return 0.01 * lat + 3.0; }), 1, src, rows);
  for (std::size_t i = 0; i < rows.height(); ++i) {
    if (rows.lat(i) < src.lat(0) || rows.lat(i) > src.lat(15)) continue;
    for (std::size_t j = 0; j < rows.width(); ++j) worst = std::max(worst, std::abs(lat_lin[i * 64 + j] - (0.01 * rows.lat(i) + 3.0)));
  }
  if (worst > 1e-6) fails.push_back("regrid error " + fmt(worst));

  // S2S targets of an arithmetic series against a summation loop.
  GridSpec g = GridSpec::global(2, 4);
  std::vector<float> series;
  for (int t = 0; t < 160; ++t) series.insert(series.end(), g.cells(), static_cast<float>(6 * t));
  Dataset s(g, {"x"}, 0, 6, series);
  auto pairs = build_s2s_targets(s, 336, 336);
  bool s2s_ok = pairs.targets.num_samples() == 160 - 56 - 56 + 1;
  for (std::size_t k = 0; s2s_ok && k < pairs.targets.num_samples(); ++k) {
    double sum = 0.0;
    for (std::size_t q = k + 56; q < k + 112; ++q) sum += 6.0 * static_cast<double>(q);
    s2s_ok = std::abs(pairs.targets.field(k, 0)[0] - sum / 56.0) <= 1e-7 * (sum / 56.0);
  }
  if (!s2s_ok) fails.push_back("s2s oracle");

  // GTB round trip.
  FamilyOptions o = toy.family;
  o.noise_sigma = 0.2;
  o.statics = {"lsm"};
  o.num_steps = 20;
  Dataset d = generate_synthetic(make_family(o, 1), 2);
  auto dir = fs::temp_directory_path() / ("gridformer_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  write_dataset(dir / "rt.gtb", d);
  Dataset r = read_dataset(dir / "rt.gtb");
  if (r.values().size() != d.values().size() ||
      std::memcmp(r.values().data(), d.values().data(), d.values().size() * sizeof(float)) != 0 ||
      encode_gtb(dataset_manifest(d), d.values()) != encode_gtb(dataset_manifest(r), r.values())) {
    fails.push_back("GTB round trip");
  }

  // pretrain --seed 7 twice.
  bool identical = false;
  std::string how;
  if (!cli.empty()) {
    std::ofstream(dir / "small.cfg") << R"({
  "model": {"patch_size": 2, "embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 4, "head_hidden_dim": 16,
            "drop_path": 0.1, "dropout": 0.1},
  "gen-data": {"datasets": [{"name": "a", "family_seed": 1,
                             "family": {"height": 8, "width": 16, "num_steps": 120, "noise_sigma": 0.1}}]},
  "pretrain": {"train": {"optim": {"warmup_steps": 5, "total_steps": 30}, "batch_size": 4, "eval_every": 10,
                         "val_pairs": 8, "max_lead_hours": 48}}
})";
    std::string base = "\"" + cli + "\" ";
    std::string cfg = " --config \"" + (dir / "small.cfg").string() + "\"";
    int rc = std::system((base + "gen-data" + cfg + " --seed 7 --out \"" + (dir / "data").string() + "\" >/dev/null").c_str());
    for (const char* run : {"run1", "run2"}) {
      rc |= std::system((base + "pretrain" + cfg + " --data \"" + (dir / "data" / "a.gtb").string() +
                         "\" --seed 7 --out \"" + (dir / run).string() + "\" >/dev/null")
                            .c_str());
    }
    identical = rc == 0 && same_file(dir / "run1" / "checkpoint.gtb", dir / "run2" / "checkpoint.gtb");
    how = "CLI checkpoints";
  } else {
    TrainConfig t = toy.pretrain;
    t.optim.total_steps = 30;
    t.optim.warmup_steps = 5;
    t.seed = 7;
    Dataset src = family_data(toy, 1);
    save_checkpoint(dir / "a.gtb", pretrain(toy.model, {src}, t).model);
    save_checkpoint(dir / "b.gtb", pretrain(toy.model, {src}, t).model);
    identical = same_file(dir / "a.gtb", dir / "b.gtb");
    how = "in-process checkpoints";
  }
  if (!identical) fails.push_back("seed 7 checkpoints differ");
  fs::remove_all(dir);

  std::string detail = "regrid max error " + fmt(worst) + ", s2s, GTB, " + how;
  for (const auto& f : fails) detail += "; " + f;
  return {fails.empty(), detail};
}

Outcome resolution_transfer(const Toy& toy) {
  ModelConfig c = toy_model(toy, {"t850", "z500"});
  c.grid_h = 16;
  c.grid_w = 32;
  Model m = init_model(c, 8);
  Model same = interpolate_pos_embed(m, 8, 16);
  bool identity = bit_equal(same.params.at("pos_embed"), m.params.at("pos_embed"));
  Model fine = interpolate_pos_embed(m, 16, 32);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  std::vector<double> v(2 * 32 * 64);
  for (auto& x : v) x = normal(rng);
  std::vector<double> lead{24.0};
  Tensor out = forward(fine, Tensor::from({1, 2, 32, 64}, v), c.variables, lead, c.variables);
  bool shape_ok = out.shape() == Shape{1, 2, 32, 64};
  auto t0 = std::chrono::steady_clock::now();
  auto g = model_gradient_check(fine, 10, 1, 16);
  return {identity && shape_ok && g.max_relative_error < 1e-5,
          std::string(identity ? "identity bit-exact" : "identity differs") + ", fine-grid forward " +
              (shape_ok ? "ok" : "wrong shape") + ", gradient check " + fmt(g.max_relative_error) + " (" +
              std::to_string(g.evaluations) + " evaluations, " + fmt(seconds_since(t0)) + " s)"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: gridformer_acceptance <toy config> [gridformer binary]\n";
    return 2;
  }
  Toy toy = load_toy(argv[1]);
  std::string cli = argc > 2 ? argv[2] : "";
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 gradient fidelity", [&] { return gradient_fidelity(toy); }},
      {"2 architecture invariants", [&] { return architecture_invariants(toy); }},
      {"3 metric oracle equivalence", [] { return metric_oracles(); }},
      {"4 table arithmetic", [] { return table_arithmetic(); }},
      {"5 training sanity", [&] { return training_sanity(toy); }},
      {"6 transfer directionality", [&] { return transfer(toy); }},
      {"7 protocol contracts", [&] { return protocol_contracts(toy); }},
      {"8 data pipeline", [&] { return data_pipeline(toy, cli); }},
      {"9 resolution transfer", [&] { return resolution_transfer(toy); }},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    auto t0 = std::chrono::steady_clock::now();
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << name << ": " << o.detail << " [" << fmt(seconds_since(t0))
              << " s]" << std::endl;
  }
  std::cout << (9 - failed) << "/9 criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
