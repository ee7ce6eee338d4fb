#include <cmath>
#include <random>

#include "doctest.h"
#include "gridformer/error.hpp"
#include "gridformer/synth.hpp"
#include "gridformer/training.hpp"
#include "test_util.hpp"

using namespace gridformer;

namespace {

Dataset family(std::vector<std::string> vars, std::uint64_t seed, std::size_t steps = 120,
               std::vector<std::string> statics = {}) {
  FamilyOptions o;
  o.height = 8;
  o.width = 16;
  o.variables = std::move(vars);
  o.statics = std::move(statics);
  o.waves_per_variable = 1;
  o.num_steps = steps;
  return generate_synthetic(make_family(o, seed), seed);
}

TrainConfig quick(std::size_t steps) {
  TrainConfig t;
  t.optim.total_steps = steps;
  t.optim.warmup_steps = 1;
  t.optim.peak_lr = 1e-3;
  t.batch_size = 2;
  t.eval_every = steps;
  t.val_pairs = 4;
  t.max_eval_samples = 4;
  t.max_lead_hours = 24;
  t.seed = 3;
  return t;
}

ModelConfig tiny() {
  auto c = testutil::toy_config(0, 8, 16);
  c.variables.clear();
  return c;
}

bool same_params(const ParamStore& a, const ParamStore& b, const std::string& name) {
  auto x = a.at(name).data(), y = b.at(name).data();
  return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

}  // namespace

TEST_CASE("lr schedule") {
  OptimConfig c;
  c.peak_lr = 5e-4;
  c.warmup_steps = 10000;
  c.total_steps = 100000;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(5000, c) == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(lr_at(10000, c) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(100000, c) == 0.0);
  CHECK(lr_at(200000, c) == 0.0);
  CHECK(lr_at(55000, c) == doctest::Approx(2.5e-4).epsilon(1e-9));
  CHECK(std::abs(lr_at(9999, c) - lr_at(10000, c)) < 1e-7);
  for (std::size_t s = 0; s <= 100000; s += 997) CHECK(lr_at(s, c) >= 0.0);
  c.warmup_steps = c.total_steps + 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("adamw hand-computed step") {
  PrecisionScope f64(Precision::f64);
  OptimConfig c;
  c.weight_decay = 0.1;
  double lr = 0.01;
  ParamStore ps;
  ps.add("w", Tensor::from({1}, {1.0}, true));
  ps.add("pos_embed", Tensor::from({1}, {1.0}, true));
  AdamW opt(c);
  for (auto& [name, t] : ps) {
    Tensor loss = ops::scale(ops::sum_all(ops::mul(t, t)), 0.5);
    loss.backward();
  }
  opt.step(ps, lr);
  CHECK(std::abs(ps.at("w").item() - (1.0 - lr * c.weight_decay - lr / (1.0 + c.eps))) < 1e-8);
  CHECK(std::abs(ps.at("pos_embed").item() - (1.0 - lr / (1.0 + c.eps))) < 1e-8);
}

TEST_CASE("adamw identities and guards") {
  PrecisionScope f64(Precision::f64);
  OptimConfig c;
  c.weight_decay = 0.0;
  ParamStore ps;
  ps.add("a", Tensor::from({3}, {0.5, -1.0, 2.0}, true));
  ps.add("frozen", Tensor::from({2}, {1.0, 2.0}, false));
  ps.at("a").mutable_grad();
  AdamW opt(c);
  opt.step(ps, 1e-2);
  CHECK(ps.at("a").at(1) == -1.0);  // zero gradient, no decay

  c.weight_decay = 0.5;
  AdamW idle(c);
  ps.at("a").mutable_grad()[0] = 3.0;
  idle.step(ps, 0.0);
  CHECK(ps.at("a").at(0) == 0.5);

  ps.at("a").mutable_grad()[2] = std::nan("");
  CHECK_THROWS_AS(idle.step(ps, 1e-2), NumericError);
  CHECK(ps.at("a").at(0) == 0.5);
  CHECK(ps.at("frozen").at(1) == 2.0);
}

TEST_CASE("lead lattice") {
  auto l = lead_lattice(6, 168, 6);
  CHECK(l.size() == 28);
  CHECK(l.front() == 6);
  CHECK(l.back() == 168);
  CHECK(lead_lattice(6, 168, 24).size() == 7);
  CHECK_THROWS_AS(lead_lattice(6, 10, 24), ValidationError);
}

TEST_CASE("pretrain: determinism, disjoint sources, missing variables") {
  auto a = family({"t850", "z500"}, 1);
  auto b = family({"u10", "v10"}, 2);
  auto cfg = quick(4);
  auto r1 = pretrain(tiny(), {a, b}, cfg);
  auto r2 = pretrain(tiny(), {a, b}, cfg);
  CHECK(r1.model.config.variables == std::vector<std::string>{"t850", "z500", "u10", "v10"});
  CHECK(r1.log.size() == 4);
  CHECK(r1.log.back().val_loss.has_value());
  for (const auto& [name, t] : r1.model.params) CHECK(same_params(r1.model.params, r2.model.params, name));

  auto frozen_cfg = cfg;
  frozen_cfg.optim.peak_lr = 0.0;
  auto untouched = pretrain(tiny(), {a, b}, frozen_cfg);
  for (auto v : {"t850", "u10"}) {
    CHECK_FALSE(same_params(r1.model.params, untouched.model.params, std::string("token_embed.") + v + ".weight"));
  }

  auto partial = family({"t850"}, 3);
  auto r3 = pretrain(tiny(), {a, partial}, cfg);
  CHECK(std::isfinite(r3.best_val_loss));
  CHECK(r3.persistence_val_loss > 0.0);

  FamilyOptions o;
  o.height = 4;
  o.width = 8;
  o.num_steps = 60;
  CHECK_THROWS_AS(pretrain(tiny(), {a, generate_synthetic(make_family(o, 1), 1)}, cfg), ValidationError);
}

TEST_CASE("step log csv") {
  std::vector<StepLogRow> log{{1, 0.5, 2.0, std::nullopt}, {2, 0.25, 1.5, 1.25}};
  CHECK(step_log_csv(log) == "step,lr,train_loss,val_loss\n1,0.5,2,\n2,0.25,1.5,1.25\n");
}

TEST_CASE("frozen projection keeps the backbone bit-identical") {
  auto base = pretrain(tiny(), {family({"t850", "z500"}, 1)}, quick(2)).model;
  FinetuneData data{family({"co2", "so2"}, 4, 80), family({"tas"}, 5, 80)};
  ProtocolSpec p;
  p.mode = FinetuneMode::projection_frozen;
  p.history = 3;
  auto r = finetune(base, p, data, quick(3));
  std::size_t kept = 0, changed_norm = 0;
  for (const auto& [name, t] : base.params) {
    if (name.rfind("head.", 0) == 0) continue;  // forecast head, resized for the new vocabulary
    if (is_layer_norm_parameter(name)) {
      changed_norm += !same_params(base.params, r.model.params, name);
    } else {
      CHECK_MESSAGE(same_params(base.params, r.model.params, name), name);
      ++kept;
    }
  }
  CHECK(kept > 10);
  CHECK(changed_norm > 0);
  CHECK(r.report.value("tas", 0, "trmse") >= 0.0);

  p.mode = FinetuneMode::projection_full;
  auto full = finetune(base, p, data, quick(3));
  CHECK_FALSE(same_params(base.params, full.model.params, "blocks.0.attn.q_proj.weight"));
}

TEST_CASE("regional finetuning on the full window matches global finetuning") {
  auto base = pretrain(tiny(), {family({"t850", "z500"}, 1)}, quick(2)).model;
  FinetuneData data{family({"t850", "z500"}, 6), {}};
  ProtocolSpec direct;
  direct.targets = {"t850"};
  direct.lead_hours = 12;
  ProtocolSpec regional = direct;
  regional.mode = FinetuneMode::regional;
  regional.region = TokenWindow::full(base.config);
  auto g = finetune(base, direct, data, quick(3));
  auto r = finetune(base, regional, data, quick(3));
  REQUIRE(g.log.size() == r.log.size());
  for (std::size_t i = 0; i < g.log.size(); ++i) CHECK(g.log[i].train_loss == r.log[i].train_loss);
  for (const auto& [name, t] : g.model.params) CHECK(same_params(g.model.params, r.model.params, name));
  CHECK(g.report.value("t850", 12, "rmse") == r.report.value("t850", 12, "rmse"));

  regional.region = {1, 2, 2, 4};
  auto sub = finetune(base, regional, data, quick(2));
  CHECK(std::isfinite(sub.report.value("t850", 12, "rmse")));
  regional.region = {3, 2, 0, 8};
  CHECK_THROWS_AS(finetune(base, regional, data, quick(2)), ValidationError);
}

TEST_CASE("continuous finetuning flags extrapolated leads") {
  auto base = pretrain(tiny(), {family({"t850", "z500"}, 1)}, quick(2)).model;
  FinetuneData data{family({"t850", "z500"}, 7, 700), {}};
  ProtocolSpec p;
  p.mode = FinetuneMode::continuous;
  p.eval_leads = {12, 336};
  auto r = finetune(base, p, data, quick(2));
  bool flagged = false, inside = false;
  for (const auto& row : r.report.rows()) {
    if (row.lead_hours == 336) flagged = row.task == "continuous-extrapolation";
    if (row.lead_hours == 12) inside = row.task == "continuous";
  }
  CHECK(flagged);
  CHECK(inside);
}

TEST_CASE("downscaling pairs coarse inputs with fine targets") {
  auto base = pretrain(tiny(), {family({"t850", "z500"}, 1)}, quick(2)).model;
  auto fine = family({"t850", "z500"}, 8, 60);
  auto coarse = regrid_dataset(fine, GridSpec::global(4, 8));
  ProtocolSpec p;
  p.mode = FinetuneMode::downscale;
  p.targets = {"t850"};
  auto r = finetune(base, p, {coarse, fine}, quick(2));
  CHECK(r.report.value("t850", 0, "rmse") >= 0.0);
  CHECK(std::abs(r.report.value("t850", 0, "pearson")) <= 1.0);
  CHECK_THROWS_AS(finetune(base, p, {coarse.time_slice(0, 50), fine}, quick(2)), ValidationError);
}

TEST_CASE("rollout contracts") {
  PrecisionScope f64(Precision::f64);
  std::mt19937_64 rng(11);
  auto cfg = testutil::toy_config(3, 8, 16);
  Model m = init_model(cfg, 2);
  auto vars = cfg.variables;  // v0, v1 dynamic; v2 static
  std::vector<std::string> statics{vars[2]};
  Tensor x0 = testutil::random_tensor({2, 3, 8, 16}, rng);
  std::vector<std::string> dyn{vars[0], vars[1]};
  std::vector<double> leads{6, 6};

  auto one = rollout(m, x0, vars, statics, 6, 6);
  CHECK(one.forward_calls == 1);
  CHECK(one.variables == dyn);
  Tensor direct = forward(m, x0, vars, leads, dyn);
  CHECK(testutil::max_abs_diff(one.states[0], direct) < 1e-12);

  auto four = rollout(m, x0, vars, statics, 24, 6);
  CHECK(four.forward_calls == 4);
  CHECK(four.states.size() == 4);

  std::vector<std::size_t> si{2};
  Tensor fixed = ops::index_select(x0, 1, si);
  Tensor second = forward(m, ops::concat({one.states[0], fixed}, 1), vars, leads, dyn);
  CHECK(testutil::max_abs_diff(four.states[1], second) < 1e-12);

  CHECK_THROWS_AS(rollout(m, x0, vars, statics, 20, 6), ValidationError);
  CHECK_THROWS_AS(rollout(m, x0, vars, vars, 6, 6), ValidationError);
}

TEST_CASE("evaluation with oracle and persistence predictors") {
  auto d = family({"t850", "z500"}, 9, 60);
  auto stats = compute_norm_stats(d);
  auto oracle = evaluate_forecast(nullptr, d, stats, {"t850"}, {6, 24}, 40, 60, Predictor::oracle, "forecast");
  CHECK(oracle.value("t850", 6, "rmse") == 0.0);
  CHECK(oracle.value("t850", 24, "acc") == doctest::Approx(1.0));
  auto persistence = evaluate_forecast(nullptr, d, stats, {"t850"}, {24}, 40, 60, Predictor::persistence, "forecast");
  CHECK(persistence.value("t850", 24, "rmse") > 0.0);
  CHECK_THROWS_AS(evaluate_forecast(nullptr, d, stats, {"t850"}, {24}, 40, 60, Predictor::model, "x"),
                  ValidationError);
  CHECK_THROWS_AS(evaluate_forecast(nullptr, d, stats, {"t850"}, {7}, 40, 60, Predictor::oracle, "x"),
                  ValidationError);
}

TEST_CASE("protocol and config validation") {
  ProtocolSpec p;
  CHECK_THROWS_AS(p.validate(), ValidationError);  // direct needs one target
  p.targets = {"t850"};
  p.validate();
  nlohmann::json j = p;
  auto back = j.get<ProtocolSpec>();
  CHECK(back.targets == p.targets);
  CHECK(finetune_mode_from_string("projection_frozen") == FinetuneMode::projection_frozen);
  CHECK_THROWS_AS(finetune_mode_from_string("bogus"), ValidationError);
  TrainConfig t;
  t.split.train = 0.95;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  nlohmann::json tj = TrainConfig{};
  CHECK(tj.get<TrainConfig>().optim.beta2 == 0.95);
}

TEST_CASE("rollout stays bounded on identity dynamics") {
  SynthSpec s;
  s.height = 8;
  s.width = 16;
  s.num_steps = 400;
  s.variables = {{"t850", 1.0, 0.0, {{1.0, 1.5, 1.0, 0.0, 0.3}}}, {"z500", -2.0, 0.0, {{0.8, 2.0, 2.0, 0.0, 1.1}}}};
  auto d = generate_synthetic(s, 1);
  auto cfg = testutil::toy_config(0, 8, 16);
  cfg.variables = {"t850", "z500"};
  auto t = quick(1000);
  t.optim.warmup_steps = 20;
  t.optim.peak_lr = 5e-3;
  t.batch_size = 8;
  t.eval_every = 50;
  t.patience = 100;
  t.val_pairs = 16;
  t.max_eval_samples = 16;
  ProtocolSpec p;
  p.mode = FinetuneMode::iterative;
  p.eval_leads = {6, 168};
  auto r = finetune(init_model(cfg, 1), p, {d, {}}, t);
  for (auto v : {"t850", "z500"}) {
    double e6 = r.report.value(v, 6, "rmse"), e168 = r.report.value(v, 168, "rmse");
    CHECK(e6 < 0.01);
    CHECK(e168 <= 10.0 * e6);
  }
}

TEST_CASE("frozen parameters receive no gradient") {
  auto cfg = testutil::toy_config(2, 8, 16);
  auto m = init_model(cfg, 4);
  std::mt19937_64 rng(1);
  add_projection_head(m, {"tas"}, rng);
  for (auto& [name, t] : m.params) t.set_requires_grad(is_layer_norm_parameter(name) || name.rfind("proj.", 0) == 0);
  Tensor history = testutil::random_tensor({2, 3, 2, 8, 16}, rng);
  ops::sum_all(projection_forward(m, history, cfg.variables)).backward();
  std::size_t with_grad = 0;
  for (const auto& [name, t] : m.params) {
    if (t.requires_grad()) {
      with_grad += t.has_grad();
    } else {
      CHECK_MESSAGE(!t.has_grad(), name);
    }
  }
  CHECK(with_grad > 0);
}

TEST_CASE("finetune defaults scale the reference learning rates") {
  auto f = finetune_train_config(FinetuneMode::direct);
  CHECK(f.optim.peak_lr == doctest::Approx(5e-5));
  CHECK(f.optim.beta2 == 0.999);
  CHECK(f.optim.total_steps == 500);
  CHECK(finetune_train_config(FinetuneMode::projection_full, 1.0).optim.peak_lr == 5e-4);
  CHECK(finetune_train_config(FinetuneMode::downscale, 10.0).optim.peak_lr == doctest::Approx(5e-4));
  CHECK_THROWS_AS(finetune_train_config(FinetuneMode::direct, 0.0), ValidationError);
}
