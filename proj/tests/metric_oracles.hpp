#pragma once

// Straight transcriptions of the metric formulas with explicit loops over
// (k, i, j), kept independent of the library implementation.

#include <cmath>
#include <random>
#include <vector>

namespace oracle {

struct Series {
  std::size_t n, h, w;
  std::vector<double> pred, truth;
  std::vector<double> weights;

  double P(std::size_t k, std::size_t i, std::size_t j) const { return pred[(k * h + i) * w + j]; }
  double T(std::size_t k, std::size_t i, std::size_t j) const { return truth[(k * h + i) * w + j]; }
};

inline Series random_series(std::mt19937_64& rng, std::size_t max_n = 4, std::size_t max_h = 8,
                            std::size_t max_w = 16) {
  std::uniform_int_distribution<std::size_t> dn(1, max_n), dh(1, max_h), dw(1, max_w);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> lat(-89.0, 89.0), pos(0.2, 2.0);
  Series s{dn(rng), dh(rng), dw(rng), {}, {}, {}};
  if (s.n * s.h * s.w < 2) s.w = 2;
  // Offset keeps global means away from zero for the normalized errors.
  double offset = 5.0 + 3.0 * pos(rng);
  for (std::size_t q = 0; q < s.n * s.h * s.w; ++q) {
    double t = offset + normal(rng);
    s.truth.push_back(t);
    s.pred.push_back(t + 0.7 * normal(rng));
  }
  double total = 0.0;
  std::vector<double> cosines;
  for (std::size_t i = 0; i < s.h; ++i) {
    cosines.push_back(std::cos(lat(rng) * 3.14159265358979323846 / 180.0));
    total += cosines.back();
  }
  for (double c : cosines) s.weights.push_back(c * static_cast<double>(s.h) / total);
  return s;
}

inline double lat_mse(const Series& s) {
  double acc = 0.0;
  for (std::size_t k = 0; k < s.n; ++k)
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j) acc += s.weights[i] * (s.P(k, i, j) - s.T(k, i, j)) * (s.P(k, i, j) - s.T(k, i, j));
  return acc / static_cast<double>(s.n * s.h * s.w);
}

inline double lat_rmse(const Series& s) {
  double acc = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) {
    double inner = 0.0;
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j) inner += s.weights[i] * std::pow(s.P(k, i, j) - s.T(k, i, j), 2);
    acc += std::sqrt(inner / static_cast<double>(s.h * s.w));
  }
  return acc / static_cast<double>(s.n);
}

inline double clim(const Series& s, std::size_t i, std::size_t j) {
  double c = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) c += s.T(k, i, j);
  return c / static_cast<double>(s.n);
}

inline double acc(const Series& s) {
  double num = 0.0, a2 = 0.0, b2 = 0.0;
  for (std::size_t k = 0; k < s.n; ++k)
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j) {
        double a = s.P(k, i, j) - clim(s, i, j);
        double b = s.T(k, i, j) - clim(s, i, j);
        num += s.weights[i] * a * b;
        a2 += s.weights[i] * a * a;
        b2 += s.weights[i] * b * b;
      }
  return num / std::sqrt(a2 * b2);
}

// <A> for the field A(i, j).
template <class F>
double bracket(const Series& s, F a) {
  double g = 0.0;
  for (std::size_t i = 0; i < s.h; ++i)
    for (std::size_t j = 0; j < s.w; ++j) g += s.weights[i] * a(i, j);
  return g / static_cast<double>(s.h * s.w);
}

inline double truth_global_mean(const Series& s) {
  double d = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) d += bracket(s, [&](std::size_t i, std::size_t j) { return s.T(k, i, j); });
  return d / static_cast<double>(s.n);
}

inline double nrmse_s(const Series& s) {
  auto sq = [&](std::size_t i, std::size_t j) {
    double mp = 0.0, mt = 0.0;
    for (std::size_t k = 0; k < s.n; ++k) {
      mp += s.P(k, i, j);
      mt += s.T(k, i, j);
    }
    double d = (mp - mt) / static_cast<double>(s.n);
    return d * d;
  };
  return std::sqrt(bracket(s, sq)) / truth_global_mean(s);
}

inline double nrmse_g(const Series& s) {
  double acc = 0.0;
  for (std::size_t k = 0; k < s.n; ++k) {
    double gp = bracket(s, [&](std::size_t i, std::size_t j) { return s.P(k, i, j); });
    double gt = bracket(s, [&](std::size_t i, std::size_t j) { return s.T(k, i, j); });
    acc += (gp - gt) * (gp - gt);
  }
  return std::sqrt(acc / static_cast<double>(s.n)) / truth_global_mean(s);
}

inline double mean_bias(const Series& s) {
  double p = 0.0, t = 0.0;
  for (std::size_t k = 0; k < s.n; ++k)
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j) {
        p += s.P(k, i, j);
        t += s.T(k, i, j);
      }
  double n = static_cast<double>(s.n * s.h * s.w);
  return p / n - t / n;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  double n = static_cast<double>(x.size()), sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t q = 0; q < x.size(); ++q) {
    sx += x[q];
    sy += y[q];
  }
  double mx = sx / n, my = sy / n;
  for (std::size_t q = 0; q < x.size(); ++q) {
    sxx += (x[q] - mx) * (x[q] - mx);
    syy += (y[q] - my) * (y[q] - my);
    sxy += (x[q] - mx) * (y[q] - my);
  }
  return (sxy / n) / (std::sqrt(sxx / n) * std::sqrt(syy / n));
}

}  // namespace oracle
