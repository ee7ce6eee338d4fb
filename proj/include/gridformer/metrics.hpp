#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gridformer/grid.hpp"
#include "gridformer/tensor.hpp"
#include "json.hpp"

namespace gridformer {

// L(i) = cos(lat_i) / mean_j cos(lat_j).
std::vector<double> lat_weights(std::span<const double> lats_deg);
inline std::vector<double> lat_weights(const GridSpec& grid) { return lat_weights(grid.lats()); }

// Mean of L(i) * (pred - truth)^2 over every element; the last two axes of
// pred and truth are [H, W]. Differentiable.
Tensor lat_mse(const Tensor& pred, const Tensor& truth, std::span<const double> weights);

// N forecasts of an H x W field, stored contiguously.
struct FieldShape {
  std::size_t n = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t size() const { return n * h * w; }
};

// Mean over forecasts of the per-forecast weighted RMSE.
double lat_rmse(std::span<const double> pred, std::span<const double> truth, FieldShape shape,
                std::span<const double> weights);

// Temporal mean over the N forecasts, H x W.
std::vector<double> climatology(std::span<const double> truth, FieldShape shape);

// Weighted anomaly correlation pooled over forecasts and grid points.
double acc(std::span<const double> pred, std::span<const double> truth, std::span<const double> clim,
           FieldShape shape, std::span<const double> weights);

double nrmse_spatial(std::span<const double> pred, std::span<const double> truth, FieldShape shape,
                     std::span<const double> weights);
double nrmse_global(std::span<const double> pred, std::span<const double> truth, FieldShape shape,
                    std::span<const double> weights);
inline constexpr double kTrmseAlpha = 5.0;
inline double trmse(double spatial, double global, double alpha = kTrmseAlpha) { return spatial + alpha * global; }

double mean_bias(std::span<const double> pred, std::span<const double> truth);
double pearson(std::span<const double> pred, std::span<const double> truth);

struct MetricRow {
  std::string task;
  std::string variable;
  double lead_hours = 0.0;
  std::string metric;
  double value = 0.0;
};

class MetricReport {
 public:
  void add(std::string task, std::string variable, double lead_hours, std::string metric, double value);
  const std::vector<MetricRow>& rows() const { return rows_; }
  // First row matching all three keys; throws if absent.
  double value(const std::string& variable, double lead_hours, const std::string& metric) const;
  void append(const MetricReport& other);

  std::string to_csv() const;
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& dir) const;  // metrics.csv + metrics.json

 private:
  std::vector<MetricRow> rows_;
};

}  // namespace gridformer
