#include "gridformer/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "gridformer/error.hpp"
#include "gridformer/ops.hpp"

namespace gridformer {

namespace {

void check_pair(std::span<const double> pred, std::span<const double> truth, FieldShape shape,
                std::span<const double> weights) {
  if (pred.size() != shape.size() || truth.size() != shape.size()) {
    throw ShapeError("metric inputs of " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()) +
                     " values do not match " + std::to_string(shape.n) + "x" + std::to_string(shape.h) + "x" +
                     std::to_string(shape.w));
  }
  if (weights.size() != shape.h) {
    throw ShapeError("got " + std::to_string(weights.size()) + " latitude weights for " + std::to_string(shape.h) +
                     " rows");
  }
  if (shape.size() == 0) throw ValidationError("metric inputs are empty");
}

// <A> for one H x W field.
double global_mean(const double* a, FieldShape s, std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.h; ++i) {
    for (std::size_t j = 0; j < s.w; ++j) total += weights[i] * a[i * s.w + j];
  }
  return total / static_cast<double>(s.h * s.w);
}

double mean_global_truth(std::span<const double> truth, FieldShape s, std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) total += global_mean(truth.data() + k * s.h * s.w, s, weights);
  double d = total / static_cast<double>(s.n);
  if (d == 0.0 || !std::isfinite(d)) throw NumericError("normalized RMSE undefined: global mean of truth is zero");
  return d;
}

}  // namespace

std::vector<double> lat_weights(std::span<const double> lats_deg) {
  if (lats_deg.empty()) throw ValidationError("latitude weights need at least one row");
  std::vector<double> w;
  double total = 0.0;
  for (double lat : lats_deg) {
    w.push_back(std::cos(lat * std::numbers::pi / 180.0));
    total += w.back();
  }
  double mean = total / static_cast<double>(w.size());
  if (!(mean > 1e-12)) throw ValidationError("latitude weights undefined: all rows at the poles");
  for (auto& x : w) x /= mean;
  return w;
}

Tensor lat_mse(const Tensor& pred, const Tensor& truth, std::span<const double> weights) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("lat_mse: prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  }
  if (pred.rank() < 2 || pred.dim(pred.rank() - 2) != weights.size()) {
    throw ShapeError("lat_mse: " + std::to_string(weights.size()) + " latitude weights for " +
                     shape_str(pred.shape()));
  }
  Tensor err = ops::sub(pred, truth);
  Tensor w = Tensor::from({weights.size(), 1}, std::vector<double>(weights.begin(), weights.end()));
  return ops::mean_all(ops::mul(ops::mul(err, err), w));
}

double lat_rmse(std::span<const double> pred, std::span<const double> truth, FieldShape s,
                std::span<const double> weights) {
  check_pair(pred, truth, s, weights);
  double total = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) {
    double sq = 0.0;
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        std::size_t idx = (k * s.h + i) * s.w + j;
        double e = pred[idx] - truth[idx];
        sq += weights[i] * e * e;
      }
    }
    total += std::sqrt(sq / static_cast<double>(s.h * s.w));
  }
  return total / static_cast<double>(s.n);
}

std::vector<double> climatology(std::span<const double> truth, FieldShape s) {
  if (truth.size() != s.size() || s.n == 0) throw ShapeError("climatology: truth does not match its shape");
  std::vector<double> c(s.h * s.w, 0.0);
  for (std::size_t k = 0; k < s.n; ++k) {
    for (std::size_t c_idx = 0; c_idx < c.size(); ++c_idx) c[c_idx] += truth[k * c.size() + c_idx];
  }
  for (auto& x : c) x /= static_cast<double>(s.n);
  return c;
}

double acc(std::span<const double> pred, std::span<const double> truth, std::span<const double> clim, FieldShape s,
           std::span<const double> weights) {
  check_pair(pred, truth, s, weights);
  if (clim.size() != s.h * s.w) throw ShapeError("acc: climatology must be H x W");
  double num = 0.0, pp = 0.0, tt = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) {
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        std::size_t cell = i * s.w + j, idx = k * s.h * s.w + cell;
        double a = pred[idx] - clim[cell], b = truth[idx] - clim[cell];
        num += weights[i] * a * b;
        pp += weights[i] * a * a;
        tt += weights[i] * b * b;
      }
    }
  }
  if (pp == 0.0 || tt == 0.0) throw NumericError("acc undefined: zero anomaly variance");
  return num / std::sqrt(pp * tt);
}

double nrmse_spatial(std::span<const double> pred, std::span<const double> truth, FieldShape s,
                     std::span<const double> weights) {
  check_pair(pred, truth, s, weights);
  auto mp = climatology(pred, s);
  auto mt = climatology(truth, s);
  std::vector<double> sq(mp.size());
  for (std::size_t c = 0; c < sq.size(); ++c) sq[c] = (mp[c] - mt[c]) * (mp[c] - mt[c]);
  return std::sqrt(global_mean(sq.data(), s, weights)) / mean_global_truth(truth, s, weights);
}

double nrmse_global(std::span<const double> pred, std::span<const double> truth, FieldShape s,
                    std::span<const double> weights) {
  check_pair(pred, truth, s, weights);
  double total = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) {
    double d = global_mean(pred.data() + k * s.h * s.w, s, weights) -
               global_mean(truth.data() + k * s.h * s.w, s, weights);
    total += d * d;
  }
  return std::sqrt(total / static_cast<double>(s.n)) / mean_global_truth(truth, s, weights);
}

double mean_bias(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("mean_bias: inputs differ in size or are empty");
  double sp = 0.0, st = 0.0;
  for (double x : pred) sp += x;
  for (double x : truth) st += x;
  return sp / static_cast<double>(pred.size()) - st / static_cast<double>(truth.size());
}

double pearson(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("pearson: inputs differ in size or are empty");
  double n = static_cast<double>(pred.size());
  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += truth[i];
  }
  mp /= n;
  mt /= n;
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double a = pred[i] - mp, b = truth[i] - mt;
    cov += a * b;
    vp += a * a;
    vt += b * b;
  }
  if (vp == 0.0 || vt == 0.0) throw NumericError("pearson undefined: zero variance");
  return cov / std::sqrt(vp * vt);
}

void MetricReport::add(std::string task, std::string variable, double lead_hours, std::string metric, double value) {
  rows_.push_back({std::move(task), std::move(variable), lead_hours, std::move(metric), value});
}

double MetricReport::value(const std::string& variable, double lead_hours, const std::string& metric) const {
  for (const auto& r : rows_) {
    if (r.variable == variable && r.lead_hours == lead_hours && r.metric == metric) return r.value;
  }
  throw ValidationError("no " + metric + " row for " + variable + " at " + std::to_string(lead_hours) + " h");
}

void MetricReport::append(const MetricReport& other) { rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end()); }

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "task,variable,lead_hours,metric,value\n";
  for (const auto& r : rows_) {
    out << r.task << ',' << r.variable << ',' << r.lead_hours << ',' << r.metric << ',' << r.value << '\n';
  }
  return out.str();
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rows_) {
    rows.push_back({{"task", r.task},
                    {"variable", r.variable},
                    {"lead_hours", r.lead_hours},
                    {"metric", r.metric},
                    {"value", r.value}});
  }
  return rows;
}

void MetricReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  csv << to_csv();
  std::ofstream js(dir / "metrics.json");
  js << to_json().dump(2) << '\n';
  if (!csv || !js) throw std::runtime_error("failed writing metrics to " + dir.string());
}

}  // namespace gridformer
