#include "gridformer/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "gridformer/error.hpp"

namespace gridformer {

void NormStats::set(const std::string& name, VariableStats stats) {
  if (!(stats.std > 0.0) || !std::isfinite(stats.std) || !std::isfinite(stats.mean)) {
    throw ValidationError("variable '" + name + "' has zero or invalid standard deviation");
  }
  stats_[name] = stats;
}

const VariableStats& NormStats::at(const std::string& name) const {
  auto it = stats_.find(name);
  if (it == stats_.end()) throw ValidationError("no normalization stats for variable '" + name + "'");
  return it->second;
}

void NormStats::merge_missing(const NormStats& other) {
  for (const auto& [name, s] : other.stats_) stats_.emplace(name, s);
}

Dataset::Dataset(GridSpec grid, std::vector<std::string> variables, std::int64_t start_hours,
                 std::int64_t step_hours, std::vector<float> values)
    : grid_(std::move(grid)),
      variables_(std::move(variables)),
      start_hours_(start_hours),
      step_hours_(step_hours),
      values_(std::move(values)) {
  if (variables_.empty()) throw ValidationError("dataset needs at least one variable");
  VariableVocabulary unique(variables_);  // rejects duplicates
  if (step_hours_ <= 0) throw ValidationError("time step must be positive");
  std::size_t per = sample_size();
  if (per == 0 || values_.size() % per != 0) {
    throw ValidationError("dataset payload of " + std::to_string(values_.size()) +
                          " values is not a whole number of samples");
  }
  num_samples_ = values_.size() / per;
  if (num_samples_ == 0) throw ValidationError("dataset needs at least one sample");
  for (float v : values_) {
    if (!std::isfinite(v)) throw ValidationError("dataset contains non-finite values");
  }
}

std::size_t Dataset::variable_index(const std::string& name) const {
  auto it = std::find(variables_.begin(), variables_.end(), name);
  if (it == variables_.end()) throw ValidationError("dataset has no variable '" + name + "'");
  return static_cast<std::size_t>(it - variables_.begin());
}

bool Dataset::has_variable(const std::string& name) const {
  return std::find(variables_.begin(), variables_.end(), name) != variables_.end();
}

std::span<const float> Dataset::sample_values(std::size_t t) const {
  if (t >= num_samples_) throw ValidationError("sample index " + std::to_string(t) + " out of range");
  return std::span<const float>(values_).subspan(t * sample_size(), sample_size());
}

std::span<const float> Dataset::field(std::size_t t, std::size_t v) const {
  return sample_values(t).subspan(v * grid_.cells(), grid_.cells());
}

GriddedSample Dataset::sample(std::size_t t) const {
  auto s = sample_values(t);
  return GriddedSample{time_at(t), variables_, std::vector<float>(s.begin(), s.end())};
}

void Dataset::set_static_variables(std::vector<std::string> names) {
  for (const auto& n : names) variable_index(n);
  statics_ = std::move(names);
}

bool Dataset::is_static(const std::string& name) const {
  return std::find(statics_.begin(), statics_.end(), name) != statics_.end();
}

std::vector<std::string> Dataset::dynamic_variables() const {
  std::vector<std::string> out;
  for (const auto& v : variables_) {
    if (!is_static(v)) out.push_back(v);
  }
  return out;
}

Dataset Dataset::time_slice(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > num_samples_) {
    throw ValidationError("time slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range");
  }
  std::vector<float> vals(values_.begin() + static_cast<std::ptrdiff_t>(begin * sample_size()),
                          values_.begin() + static_cast<std::ptrdiff_t>(end * sample_size()));
  Dataset out(grid_, variables_, time_at(begin), step_hours_, std::move(vals));
  out.statics_ = statics_;
  out.norm_ = norm_;
  out.generator_ = generator_;
  return out;
}

Dataset Dataset::select_variables(const std::vector<std::string>& names) const {
  std::vector<std::size_t> idx;
  for (const auto& n : names) idx.push_back(variable_index(n));
  std::size_t cells = grid_.cells();
  std::vector<float> vals;
  vals.reserve(num_samples_ * names.size() * cells);
  for (std::size_t t = 0; t < num_samples_; ++t) {
    for (auto v : idx) {
      auto f = field(t, v);
      vals.insert(vals.end(), f.begin(), f.end());
    }
  }
  Dataset out(grid_, names, start_hours_, step_hours_, std::move(vals));
  std::vector<std::string> statics;
  for (const auto& n : names) {
    if (is_static(n)) statics.push_back(n);
  }
  out.statics_ = std::move(statics);
  out.norm_ = norm_;
  out.generator_ = generator_;
  return out;
}

NormStats compute_norm_stats(const Dataset& data, std::size_t begin, std::size_t end) {
  if (begin >= end || end > data.num_samples()) throw ValidationError("norm stats need a nonempty sample range");
  NormStats stats;
  std::size_t cells = data.grid().cells();
  for (std::size_t v = 0; v < data.num_variables(); ++v) {
    double total = 0.0;
    for (std::size_t t = begin; t < end; ++t) {
      for (float x : data.field(t, v)) total += x;
    }
    double n = static_cast<double>((end - begin) * cells);
    double mean = total / n;
    double sq = 0.0;
    for (std::size_t t = begin; t < end; ++t) {
      for (float x : data.field(t, v)) sq += (x - mean) * (x - mean);
    }
    stats.set(data.variables()[v], {mean, std::sqrt(sq / n)});
  }
  return stats;
}

namespace {

void apply_stats(GriddedSample& sample, const NormStats& stats, bool forward) {
  std::size_t nv = sample.variables.size();
  if (nv == 0 || sample.values.size() % nv != 0) throw ShapeError("sample values do not match its variables");
  std::size_t cells = sample.values.size() / nv;
  for (std::size_t v = 0; v < nv; ++v) {
    const auto& s = stats.at(sample.variables[v]);
    for (std::size_t i = 0; i < cells; ++i) {
      float& x = sample.values[v * cells + i];
      x = forward ? static_cast<float>((x - s.mean) / s.std) : static_cast<float>(x * s.std + s.mean);
    }
  }
}

}  // namespace

void normalize(GriddedSample& sample, const NormStats& stats) { apply_stats(sample, stats, true); }
void denormalize(GriddedSample& sample, const NormStats& stats) { apply_stats(sample, stats, false); }

std::vector<float> normalized_values(const Dataset& data, const NormStats& stats) {
  std::vector<float> out(data.values().begin(), data.values().end());
  std::size_t cells = data.grid().cells();
  std::vector<VariableStats> per;
  for (const auto& v : data.variables()) per.push_back(stats.at(v));
  std::size_t nv = per.size();
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto& s = per[(k / cells) % nv];
    out[k] = static_cast<float>((out[k] - s.mean) / s.std);
  }
  return out;
}

Dataset regrid_dataset(const Dataset& data, const GridSpec& target) {
  std::vector<float> out;
  out.reserve(data.num_samples() * data.num_variables() * target.cells());
  for (std::size_t t = 0; t < data.num_samples(); ++t) {
    auto r = regrid_bilinear(data.sample_values(t), data.num_variables(), data.grid(), target);
    out.insert(out.end(), r.begin(), r.end());
  }
  Dataset result(target, data.variables(), data.start_hours(), data.step_hours(), std::move(out));
  result.set_static_variables(data.static_variables());
  result.set_norm_stats(data.norm_stats());
  result.set_generator(data.generator());
  return result;
}

namespace {

std::vector<float> gather_cells(std::span<const float> values, std::size_t channels, std::size_t width,
                                const CropIndices& idx) {
  std::size_t cells = values.size() / channels;
  std::vector<float> out;
  out.reserve(channels * idx.rows.size() * idx.cols.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (auto i : idx.rows) {
      for (auto j : idx.cols) out.push_back(values[c * cells + i * width + j]);
    }
  }
  return out;
}

}  // namespace

GriddedSample crop_region(const GriddedSample& sample, const GridSpec& grid, double lat_min, double lat_max,
                          double lon_min, double lon_max, GridSpec* cropped_grid) {
  std::size_t nv = sample.variables.size();
  if (nv == 0 || sample.values.size() != nv * grid.cells()) throw ShapeError("sample does not match its grid");
  auto idx = crop_indices(grid, lat_min, lat_max, lon_min, lon_max);
  if (cropped_grid) *cropped_grid = crop_grid(grid, idx);
  return GriddedSample{sample.time, sample.variables, gather_cells(sample.values, nv, grid.width(), idx)};
}

Dataset crop_dataset(const Dataset& data, const CropIndices& idx) {
  GridSpec sub = crop_grid(data.grid(), idx);
  std::vector<float> out;
  for (std::size_t t = 0; t < data.num_samples(); ++t) {
    auto c = gather_cells(data.sample_values(t), data.num_variables(), data.grid().width(), idx);
    out.insert(out.end(), c.begin(), c.end());
  }
  Dataset result(sub, data.variables(), data.start_hours(), data.step_hours(), std::move(out));
  result.set_static_variables(data.static_variables());
  result.set_norm_stats(data.norm_stats());
  result.set_generator(data.generator());
  return result;
}

Dataset crop_dataset(const Dataset& data, double lat_min, double lat_max, double lon_min, double lon_max) {
  return crop_dataset(data, crop_indices(data.grid(), lat_min, lat_max, lon_min, lon_max));
}

S2SPairs build_s2s_targets(const Dataset& series, std::int64_t lead_hours, std::int64_t window_hours) {
  std::int64_t step = series.step_hours();
  if (lead_hours <= 0 || window_hours <= 0) throw ValidationError("s2s: lead and window must be positive");
  if (window_hours % step != 0 || lead_hours % step != 0) {
    throw ValidationError("s2s: series step " + std::to_string(step) + " h must divide lead and window");
  }
  auto lead = static_cast<std::size_t>(lead_hours / step);
  auto window = static_cast<std::size_t>(window_hours / step);
  std::size_t total = series.num_samples();
  std::size_t usable = total >= lead + window ? total - lead - window + 1 : 0;
  if (usable == 0) throw ValidationError("s2s: series too short for lead + window");

  std::size_t per = series.sample_size();
  std::vector<float> targets(usable * per);
  std::vector<double> acc(per);
  for (std::size_t t = 0; t < usable; ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = t + lead; k < t + lead + window; ++k) {
      auto s = series.sample_values(k);
      for (std::size_t i = 0; i < per; ++i) acc[i] += s[i];
    }
    for (std::size_t i = 0; i < per; ++i) {
      targets[t * per + i] = static_cast<float>(acc[i] / static_cast<double>(window));
    }
  }
  S2SPairs out{series.time_slice(0, usable),
               Dataset(series.grid(), series.variables(), series.start_hours(), step, std::move(targets)),
               total - usable, lead_hours, window_hours};
  out.targets.set_static_variables(series.static_variables());
  out.targets.set_norm_stats(series.norm_stats());
  nlohmann::json meta = series.generator();
  meta["s2s"] = {{"lead_hours", lead_hours}, {"window_hours", window_hours}};
  out.targets.set_generator(meta);
  return out;
}

}  // namespace gridformer
