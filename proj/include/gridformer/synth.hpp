#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridformer/dataset.hpp"
#include "json.hpp"

namespace gridformer {

// A traveling wave A * sin(a * lat + b * lon - omega * t + phase), with lat
// and lon in radians and t in hours. Integer `lon_wavenumber` keeps the
// field periodic in longitude.
struct WaveComponent {
  double amplitude = 1.0;
  double lat_wavenumber = 1.0;
  double lon_wavenumber = 1.0;
  double omega = 0.0;  // radians per hour
  double phase = 0.0;
};

struct SynthVariable {
  std::string name;
  double offset = 0.0;
  double noise_sigma = 0.0;
  std::vector<WaveComponent> waves;
};

// Time-invariant field: a fixed superposition of stationary waves.
struct SynthStatic {
  std::string name;
  double offset = 0.0;
  std::vector<WaveComponent> waves;
};

// Parameters of one synthetic "climate model". Each dynamic variable follows
//   v(t) = offset + sum_k waves_k(t) + sum_u coupling[v][u] * u(t - step) + noise
// with the coupled state before the first sample taken as zero.
struct SynthSpec {
  std::size_t height = 16;
  std::size_t width = 32;
  std::vector<SynthVariable> variables;
  std::vector<SynthStatic> statics;
  std::vector<std::vector<double>> coupling;  // [V][V], empty means none
  std::int64_t start_hours = 0;
  std::int64_t step_hours = 6;
  std::size_t num_steps = 100;
  std::size_t spinup_steps = 0;
};

// Draws a random family (wave counts, speeds, amplitudes, coupling) for the
// given variable names. Different family seeds give different "models" of the
// same physics.
struct FamilyOptions {
  std::size_t height = 16;
  std::size_t width = 32;
  std::vector<std::string> variables{"t850", "z500"};
  std::vector<std::string> statics;
  std::size_t waves_per_variable = 2;
  double min_period_hours = 48.0;
  double max_period_hours = 240.0;
  double max_lat_wavenumber = 3.0;
  int max_lon_wavenumber = 3;
  double noise_sigma = 0.0;
  double coupling_scale = 0.0;
  std::size_t num_steps = 400;
};

SynthSpec make_family(const FamilyOptions& options, std::uint64_t family_seed);

// Deterministic in (spec, seed): same inputs give bit-identical datasets.
Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

void to_json(nlohmann::json& j, const WaveComponent& w);
void from_json(const nlohmann::json& j, WaveComponent& w);
void to_json(nlohmann::json& j, const SynthVariable& v);
void from_json(const nlohmann::json& j, SynthVariable& v);
void to_json(nlohmann::json& j, const SynthStatic& s);
void from_json(const nlohmann::json& j, SynthStatic& s);
void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);
void to_json(nlohmann::json& j, const FamilyOptions& f);
void from_json(const nlohmann::json& j, FamilyOptions& f);

}  // namespace gridformer
