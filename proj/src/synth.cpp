#include "gridformer/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "gridformer/error.hpp"

namespace gridformer {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void validate(const SynthSpec& spec) {
  if (spec.variables.empty() && spec.statics.empty()) throw ValidationError("synthetic spec has no variables");
  if (spec.num_steps == 0) throw ValidationError("synthetic spec needs at least one step");
  if (spec.step_hours <= 0) throw ValidationError("synthetic step must be positive");
  std::size_t nv = spec.variables.size();
  if (!spec.coupling.empty()) {
    if (spec.coupling.size() != nv) throw ValidationError("coupling matrix must be V x V");
    for (const auto& row : spec.coupling) {
      if (row.size() != nv) throw ValidationError("coupling matrix must be V x V");
    }
  }
  for (const auto& v : spec.variables) {
    if (v.noise_sigma < 0.0) throw ValidationError("noise sigma of '" + v.name + "' is negative");
  }
}

// Field of stationary phase a*lat + b*lon for each cell of the grid.
std::vector<double> spatial_phase(const GridSpec& grid, const WaveComponent& w) {
  std::vector<double> out(grid.cells());
  for (std::size_t i = 0; i < grid.height(); ++i) {
    for (std::size_t j = 0; j < grid.width(); ++j) {
      out[i * grid.width() + j] = w.lat_wavenumber * grid.lat(i) * kDeg + w.lon_wavenumber * grid.lon(j) * kDeg;
    }
  }
  return out;
}

}  // namespace

Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  validate(spec);
  GridSpec grid = GridSpec::global(spec.height, spec.width);
  std::size_t cells = grid.cells();
  std::size_t nv = spec.variables.size();
  std::size_t ns = spec.statics.size();

  std::vector<std::vector<std::vector<double>>> phases(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    for (const auto& w : spec.variables[v].waves) phases[v].push_back(spatial_phase(grid, w));
  }
  std::vector<std::vector<double>> static_fields(ns, std::vector<double>(cells, 0.0));
  for (std::size_t s = 0; s < ns; ++s) {
    for (auto& x : static_fields[s]) x = spec.statics[s].offset;
    for (const auto& w : spec.statics[s].waves) {
      auto ph = spatial_phase(grid, w);
      for (std::size_t c = 0; c < cells; ++c) static_fields[s][c] += w.amplitude * std::sin(ph[c] + w.phase);
    }
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> prev(nv * cells, 0.0), cur(nv * cells, 0.0);
  std::vector<float> values;
  values.reserve(spec.num_steps * (nv + ns) * cells);

  std::size_t total_steps = spec.spinup_steps + spec.num_steps;
  for (std::size_t step = 0; step < total_steps; ++step) {
    double t = static_cast<double>(spec.start_hours) +
               (static_cast<double>(step) - static_cast<double>(spec.spinup_steps)) *
                   static_cast<double>(spec.step_hours);
    for (std::size_t v = 0; v < nv; ++v) {
      const auto& var = spec.variables[v];
      double* out = cur.data() + v * cells;
      for (std::size_t c = 0; c < cells; ++c) out[c] = var.offset;
      for (std::size_t k = 0; k < var.waves.size(); ++k) {
        const auto& w = var.waves[k];
        const auto& ph = phases[v][k];
        for (std::size_t c = 0; c < cells; ++c) out[c] += w.amplitude * std::sin(ph[c] - w.omega * t + w.phase);
      }
      if (!spec.coupling.empty()) {
        for (std::size_t u = 0; u < nv; ++u) {
          double cvu = spec.coupling[v][u];
          if (cvu == 0.0) continue;
          const double* src = prev.data() + u * cells;
          for (std::size_t c = 0; c < cells; ++c) out[c] += cvu * src[c];
        }
      }
      if (var.noise_sigma > 0.0) {
        for (std::size_t c = 0; c < cells; ++c) out[c] += var.noise_sigma * normal(rng);
      }
    }
    std::swap(prev, cur);
    if (step < spec.spinup_steps) continue;
    for (double x : prev) values.push_back(static_cast<float>(x));
    for (const auto& f : static_fields) {
      for (double x : f) values.push_back(static_cast<float>(x));
    }
  }

  std::vector<std::string> names;
  for (const auto& v : spec.variables) names.push_back(v.name);
  std::vector<std::string> static_names;
  for (const auto& s : spec.statics) {
    names.push_back(s.name);
    static_names.push_back(s.name);
  }
  Dataset data(grid, names, spec.start_hours, spec.step_hours, std::move(values));
  data.set_static_variables(static_names);
  nlohmann::json meta;
  meta["spec"] = spec;
  meta["seed"] = seed;
  data.set_generator(meta);
  return data;
}

SynthSpec make_family(const FamilyOptions& o, std::uint64_t family_seed) {
  if (o.min_period_hours <= 0.0 || o.max_period_hours < o.min_period_hours) {
    throw ValidationError("family periods must satisfy 0 < min <= max");
  }
  std::mt19937_64 rng(family_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto draw_wave = [&](bool moving) {
    WaveComponent w;
    w.amplitude = uniform(0.5, 1.5);
    w.lat_wavenumber = uniform(0.5, std::max(0.5, o.max_lat_wavenumber));
    w.lon_wavenumber = static_cast<double>(std::uniform_int_distribution<int>(1, std::max(1, o.max_lon_wavenumber))(rng));
    w.phase = uniform(0.0, 2.0 * std::numbers::pi);
    if (moving) {
      double period = uniform(o.min_period_hours, o.max_period_hours);
      w.omega = (unit(rng) < 0.5 ? -1.0 : 1.0) * 2.0 * std::numbers::pi / period;
    }
    return w;
  };

  SynthSpec spec;
  spec.height = o.height;
  spec.width = o.width;
  spec.num_steps = o.num_steps;
  spec.spinup_steps = o.coupling_scale != 0.0 ? 8 : 0;
  for (const auto& name : o.variables) {
    SynthVariable v;
    v.name = name;
    v.offset = uniform(-5.0, 5.0);
    v.noise_sigma = o.noise_sigma;
    for (std::size_t k = 0; k < o.waves_per_variable; ++k) v.waves.push_back(draw_wave(true));
    spec.variables.push_back(std::move(v));
  }
  for (const auto& name : o.statics) {
    SynthStatic s;
    s.name = name;
    s.offset = uniform(-1.0, 1.0);
    for (int k = 0; k < 2; ++k) s.waves.push_back(draw_wave(false));
    spec.statics.push_back(std::move(s));
  }
  if (o.coupling_scale != 0.0) {
    std::size_t nv = o.variables.size();
    spec.coupling.assign(nv, std::vector<double>(nv, 0.0));
    for (auto& row : spec.coupling) {
      for (auto& c : row) c = o.coupling_scale * uniform(-1.0, 1.0) / static_cast<double>(nv);
    }
  }
  return spec;
}

void to_json(nlohmann::json& j, const WaveComponent& w) {
  j = {{"amplitude", w.amplitude},
       {"lat_wavenumber", w.lat_wavenumber},
       {"lon_wavenumber", w.lon_wavenumber},
       {"omega", w.omega},
       {"phase", w.phase}};
}

void from_json(const nlohmann::json& j, WaveComponent& w) {
  w.amplitude = j.value("amplitude", 1.0);
  w.lat_wavenumber = j.value("lat_wavenumber", 1.0);
  w.lon_wavenumber = j.value("lon_wavenumber", 1.0);
  w.omega = j.value("omega", 0.0);
  w.phase = j.value("phase", 0.0);
}

void to_json(nlohmann::json& j, const SynthVariable& v) {
  j = {{"name", v.name}, {"offset", v.offset}, {"noise_sigma", v.noise_sigma}, {"waves", v.waves}};
}

void from_json(const nlohmann::json& j, SynthVariable& v) {
  v.name = j.at("name").get<std::string>();
  v.offset = j.value("offset", 0.0);
  v.noise_sigma = j.value("noise_sigma", 0.0);
  v.waves = j.value("waves", std::vector<WaveComponent>{});
}

void to_json(nlohmann::json& j, const SynthStatic& s) {
  j = {{"name", s.name}, {"offset", s.offset}, {"waves", s.waves}};
}

void from_json(const nlohmann::json& j, SynthStatic& s) {
  s.name = j.at("name").get<std::string>();
  s.offset = j.value("offset", 0.0);
  s.waves = j.value("waves", std::vector<WaveComponent>{});
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"height", s.height},         {"width", s.width},           {"variables", s.variables},
       {"statics", s.statics},       {"coupling", s.coupling},     {"start_hours", s.start_hours},
       {"step_hours", s.step_hours}, {"num_steps", s.num_steps},   {"spinup_steps", s.spinup_steps}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  SynthSpec d;
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.variables = j.value("variables", std::vector<SynthVariable>{});
  s.statics = j.value("statics", std::vector<SynthStatic>{});
  s.coupling = j.value("coupling", std::vector<std::vector<double>>{});
  s.start_hours = j.value("start_hours", d.start_hours);
  s.step_hours = j.value("step_hours", d.step_hours);
  s.num_steps = j.value("num_steps", d.num_steps);
  s.spinup_steps = j.value("spinup_steps", d.spinup_steps);
}

void to_json(nlohmann::json& j, const FamilyOptions& f) {
  j = {{"height", f.height},
       {"width", f.width},
       {"variables", f.variables},
       {"statics", f.statics},
       {"waves_per_variable", f.waves_per_variable},
       {"min_period_hours", f.min_period_hours},
       {"max_period_hours", f.max_period_hours},
       {"max_lat_wavenumber", f.max_lat_wavenumber},
       {"max_lon_wavenumber", f.max_lon_wavenumber},
       {"noise_sigma", f.noise_sigma},
       {"coupling_scale", f.coupling_scale},
       {"num_steps", f.num_steps}};
}

void from_json(const nlohmann::json& j, FamilyOptions& f) {
  FamilyOptions d;
  f.height = j.value("height", d.height);
  f.width = j.value("width", d.width);
  f.variables = j.value("variables", d.variables);
  f.statics = j.value("statics", d.statics);
  f.waves_per_variable = j.value("waves_per_variable", d.waves_per_variable);
  f.min_period_hours = j.value("min_period_hours", d.min_period_hours);
  f.max_period_hours = j.value("max_period_hours", d.max_period_hours);
  f.max_lat_wavenumber = j.value("max_lat_wavenumber", d.max_lat_wavenumber);
  f.max_lon_wavenumber = j.value("max_lon_wavenumber", d.max_lon_wavenumber);
  f.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  f.coupling_scale = j.value("coupling_scale", d.coupling_scale);
  f.num_steps = j.value("num_steps", d.num_steps);
}

}  // namespace gridformer
