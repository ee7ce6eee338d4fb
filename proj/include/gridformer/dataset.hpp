#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gridformer/grid.hpp"
#include "json.hpp"

namespace gridformer {

// One snapshot: V x H x W values in `variables` order.
struct GriddedSample {
  std::int64_t time = 0;  // hours since epoch
  std::vector<std::string> variables;
  std::vector<float> values;
};

struct VariableStats {
  double mean = 0.0;
  double std = 1.0;
};

class NormStats {
 public:
  void set(const std::string& name, VariableStats stats);
  const VariableStats& at(const std::string& name) const;
  bool contains(const std::string& name) const { return stats_.count(name) != 0; }
  const std::map<std::string, VariableStats>& entries() const { return stats_; }
  bool empty() const { return stats_.empty(); }
  void merge_missing(const NormStats& other);

 private:
  std::map<std::string, VariableStats> stats_;
};

// A regular time series of gridded snapshots, stored as T x V x H x W floats.
// Static variables are inputs only and never used as prediction targets.
class Dataset {
 public:
  Dataset() = default;
  Dataset(GridSpec grid, std::vector<std::string> variables, std::int64_t start_hours, std::int64_t step_hours,
          std::vector<float> values);

  const GridSpec& grid() const { return grid_; }
  const std::vector<std::string>& variables() const { return variables_; }
  std::size_t num_variables() const { return variables_.size(); }
  std::size_t num_samples() const { return num_samples_; }
  std::size_t sample_size() const { return variables_.size() * grid_.cells(); }
  std::int64_t start_hours() const { return start_hours_; }
  std::int64_t step_hours() const { return step_hours_; }
  std::int64_t time_at(std::size_t t) const { return start_hours_ + static_cast<std::int64_t>(t) * step_hours_; }

  std::size_t variable_index(const std::string& name) const;
  bool has_variable(const std::string& name) const;

  std::span<const float> values() const { return values_; }
  std::span<const float> sample_values(std::size_t t) const;
  std::span<const float> field(std::size_t t, std::size_t v) const;
  GriddedSample sample(std::size_t t) const;

  const std::vector<std::string>& static_variables() const { return statics_; }
  void set_static_variables(std::vector<std::string> names);
  bool is_static(const std::string& name) const;
  // Variables that may serve as targets, in dataset order.
  std::vector<std::string> dynamic_variables() const;

  const NormStats& norm_stats() const { return norm_; }
  void set_norm_stats(NormStats stats) { norm_ = std::move(stats); }
  const nlohmann::json& generator() const { return generator_; }
  void set_generator(nlohmann::json params) { generator_ = std::move(params); }

  // Samples [begin, end) as a new dataset sharing metadata.
  Dataset time_slice(std::size_t begin, std::size_t end) const;
  // Keeps only `names`, in the given order.
  Dataset select_variables(const std::vector<std::string>& names) const;

 private:
  GridSpec grid_;
  std::vector<std::string> variables_;
  std::vector<std::string> statics_;
  std::int64_t start_hours_ = 0;
  std::int64_t step_hours_ = 6;
  std::size_t num_samples_ = 0;
  std::vector<float> values_;
  NormStats norm_;
  nlohmann::json generator_;
};

// Per-variable mean and population standard deviation over samples [begin, end).
NormStats compute_norm_stats(const Dataset& data, std::size_t begin, std::size_t end);
inline NormStats compute_norm_stats(const Dataset& data) {
  return compute_norm_stats(data, 0, data.num_samples());
}

void normalize(GriddedSample& sample, const NormStats& stats);
void denormalize(GriddedSample& sample, const NormStats& stats);
// Whole-dataset variants returning normalized / physical copies of the values.
std::vector<float> normalized_values(const Dataset& data, const NormStats& stats);

Dataset regrid_dataset(const Dataset& data, const GridSpec& target);

GriddedSample crop_region(const GriddedSample& sample, const GridSpec& grid, double lat_min, double lat_max,
                          double lon_min, double lon_max, GridSpec* cropped_grid = nullptr);
Dataset crop_dataset(const Dataset& data, const CropIndices& idx);
Dataset crop_dataset(const Dataset& data, double lat_min, double lat_max, double lon_min, double lon_max);

struct S2SPairs {
  Dataset inputs;   // X_t at each usable timestamp
  Dataset targets;  // mean of samples in [t + lead, t + lead + window)
  std::size_t skipped = 0;
  std::int64_t lead_hours = 0;
  std::int64_t window_hours = 0;
};

S2SPairs build_s2s_targets(const Dataset& series, std::int64_t lead_hours, std::int64_t window_hours);

}  // namespace gridformer
