#include "gridformer/grid.hpp"

#include <algorithm>
#include <cmath>

#include "gridformer/error.hpp"

namespace gridformer {

namespace {

constexpr double kTol = 1e-9;

double wrap360(double lon) {
  double r = std::fmod(lon, 360.0);
  if (r < 0) r += 360.0;
  if (r >= 360.0 - kTol) r = 0.0;
  return r;
}

}  // namespace

GridSpec::GridSpec(std::vector<double> lats, std::vector<double> lons)
    : lats_(std::move(lats)), lons_(std::move(lons)) {
  if (lats_.empty() || lons_.empty()) throw ValidationError("grid needs at least one latitude and longitude");
  for (double lat : lats_) {
    if (!(lat >= -90.0 - kTol && lat <= 90.0 + kTol)) {
      throw ValidationError("latitude " + std::to_string(lat) + " outside [-90, 90]");
    }
  }
  if (lats_.size() > 1) {
    bool ascending = lats_[1] > lats_[0];
    for (std::size_t i = 1; i < lats_.size(); ++i) {
      double d = lats_[i] - lats_[i - 1];
      if (d == 0.0 || (d > 0) != ascending) throw ValidationError("latitudes must be unique and monotonic");
    }
  }
  for (double lon : lons_) {
    if (!std::isfinite(lon)) throw ValidationError("non-finite longitude");
  }
  if (lons_.size() == 1) {
    lon_step_ = 360.0;
    periodic_ = true;
    return;
  }
  lon_step_ = wrap360(lons_[1] - lons_[0]);
  if (lon_step_ <= 0.0) throw ValidationError("longitudes must be distinct");
  for (std::size_t j = 1; j < lons_.size(); ++j) {
    double d = wrap360(lons_[j] - lons_[j - 1]);
    if (std::abs(d - lon_step_) > kTol) throw ValidationError("longitude spacing is not uniform");
  }
  double span = lon_step_ * static_cast<double>(lons_.size());
  if (span > 360.0 + kTol) throw ValidationError("longitudes overlap after wrapping");
  periodic_ = std::abs(span - 360.0) <= kTol;
}

GridSpec GridSpec::global(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ValidationError("grid needs at least one row and column");
  std::vector<double> lats(height), lons(width);
  double dlat = 180.0 / static_cast<double>(height);
  for (std::size_t i = 0; i < height; ++i) lats[i] = -90.0 + (static_cast<double>(i) + 0.5) * dlat;
  double dlon = 360.0 / static_cast<double>(width);
  for (std::size_t j = 0; j < width; ++j) lons[j] = static_cast<double>(j) * dlon;
  return GridSpec(std::move(lats), std::move(lons));
}

VariableVocabulary::VariableVocabulary(std::vector<std::string> names) {
  for (auto& n : names) add(n);
}

void VariableVocabulary::add(const std::string& name) {
  if (name.empty()) throw ValidationError("variable name must not be empty");
  if (contains(name)) throw ValidationError("duplicate variable '" + name + "'");
  names_.push_back(name);
}

std::optional<std::size_t> VariableVocabulary::find(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t VariableVocabulary::index_of(const std::string& name) const {
  auto idx = find(name);
  if (!idx) throw ValidationError("unknown variable '" + name + "'");
  return *idx;
}

namespace {

struct Stencil {
  std::size_t lo = 0, hi = 0;
  double frac = 0.0;  // weight of hi
};

Stencil lat_stencil(const std::vector<double>& lats, double target) {
  std::size_t h = lats.size();
  if (h == 1) return {};
  bool ascending = lats[1] > lats[0];
  double lo_val = ascending ? lats.front() : lats.back();
  double hi_val = ascending ? lats.back() : lats.front();
  double y = std::clamp(target, lo_val, hi_val);
  for (std::size_t i = 0; i + 1 < h; ++i) {
    double a = lats[i], b = lats[i + 1];
    if ((y - a) * (y - b) <= 0.0) {
      double frac = (y - a) / (b - a);
      return {i, i + 1, std::clamp(frac, 0.0, 1.0)};
    }
  }
  throw ValidationError("latitude " + std::to_string(target) + " outside source grid");
}

Stencil lon_stencil(const GridSpec& grid, double target) {
  std::size_t w = grid.width();
  if (w == 1) return {};
  double x = wrap360(target - grid.lon(0)) / grid.lon_spacing();
  if (grid.periodic()) {
    double base = std::floor(x);
    auto j0 = static_cast<std::size_t>(base) % w;
    return {j0, (j0 + 1) % w, x - base};
  }
  double last = static_cast<double>(w - 1);
  if (x > last + kTol) {
    throw ValidationError("longitude " + std::to_string(target) + " outside regional source grid");
  }
  x = std::min(x, last);
  auto j0 = std::min(static_cast<std::size_t>(std::floor(x)), w - 2);
  return {j0, j0 + 1, x - static_cast<double>(j0)};
}

}  // namespace

std::vector<float> regrid_bilinear(std::span<const float> fields, std::size_t channels, const GridSpec& from,
                                   const GridSpec& to) {
  std::size_t hs = from.height(), ws = from.width();
  if (fields.size() != channels * hs * ws) {
    throw ShapeError("regrid: field size " + std::to_string(fields.size()) + " does not match " +
                     std::to_string(channels) + "x" + std::to_string(hs) + "x" + std::to_string(ws));
  }
  std::vector<Stencil> rows(to.height()), cols(to.width());
  for (std::size_t i = 0; i < to.height(); ++i) rows[i] = lat_stencil(from.lats(), to.lat(i));
  for (std::size_t j = 0; j < to.width(); ++j) cols[j] = lon_stencil(from, to.lon(j));

  std::size_t ht = to.height(), wt = to.width();
  std::vector<float> out(channels * ht * wt);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = fields.data() + c * hs * ws;
    for (std::size_t i = 0; i < ht; ++i) {
      const auto& r = rows[i];
      for (std::size_t j = 0; j < wt; ++j) {
        const auto& q = cols[j];
        double top = (1.0 - q.frac) * src[r.lo * ws + q.lo] + q.frac * src[r.lo * ws + q.hi];
        double bottom = (1.0 - q.frac) * src[r.hi * ws + q.lo] + q.frac * src[r.hi * ws + q.hi];
        out[(c * ht + i) * wt + j] = static_cast<float>((1.0 - r.frac) * top + r.frac * bottom);
      }
    }
  }
  return out;
}

std::vector<double> resize_bilinear(std::span<const double> values, std::size_t h1, std::size_t w1,
                                    std::size_t channels, std::size_t h2, std::size_t w2) {
  if (values.size() != h1 * w1 * channels) throw ShapeError("resize: input size does not match dims");
  if (h2 == 0 || w2 == 0) throw ValidationError("resize: target dims must be positive");
  auto coord = [](std::size_t i, std::size_t n_out, std::size_t n_in) {
    if (n_out == 1 || n_in == 1) return Stencil{};
    double x = static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
    auto lo = std::min(static_cast<std::size_t>(std::floor(x)), n_in - 2);
    return Stencil{lo, lo + 1, x - static_cast<double>(lo)};
  };
  std::vector<double> out(h2 * w2 * channels);
  for (std::size_t i = 0; i < h2; ++i) {
    auto r = coord(i, h2, h1);
    for (std::size_t j = 0; j < w2; ++j) {
      auto q = coord(j, w2, w1);
      for (std::size_t c = 0; c < channels; ++c) {
        auto at = [&](std::size_t y, std::size_t x) { return values[(y * w1 + x) * channels + c]; };
        double top = (1.0 - q.frac) * at(r.lo, q.lo) + q.frac * at(r.lo, q.hi);
        double bottom = (1.0 - q.frac) * at(r.hi, q.lo) + q.frac * at(r.hi, q.hi);
        out[(i * w2 + j) * channels + c] = (1.0 - r.frac) * top + r.frac * bottom;
      }
    }
  }
  return out;
}

CropIndices crop_indices(const GridSpec& grid, double lat_min, double lat_max, double lon_min, double lon_max) {
  if (lat_min > lat_max) throw ValidationError("crop: lat_min exceeds lat_max");
  CropIndices idx;
  for (std::size_t i = 0; i < grid.height(); ++i) {
    if (grid.lat(i) >= lat_min - kTol && grid.lat(i) <= lat_max + kTol) idx.rows.push_back(i);
  }
  std::size_t w = grid.width();
  std::vector<bool> keep(w, false);
  bool full = lon_max - lon_min >= 360.0 - kTol;
  double lo = wrap360(lon_min), hi = wrap360(lon_max);
  for (std::size_t j = 0; j < w; ++j) {
    double l = wrap360(grid.lon(j));
    if (full) {
      keep[j] = true;
    } else if (lo <= hi) {
      keep[j] = l >= lo - kTol && l <= hi + kTol;
    } else {
      keep[j] = l >= lo - kTol || l <= hi + kTol;
    }
  }
  // A selection that runs across the grid's column seam is rotated so the
  // retained columns stay contiguous in longitude.
  std::size_t start = 0;
  bool all = std::all_of(keep.begin(), keep.end(), [](bool b) { return b; });
  if (grid.periodic() && !all && keep.front() && keep.back()) {
    start = w - 1;
    while (start > 0 && keep[start - 1]) --start;
  }
  for (std::size_t k = 0; k < w; ++k) {
    std::size_t j = (start + k) % w;
    if (keep[j]) idx.cols.push_back(j);
  }
  if (idx.rows.empty() || idx.cols.empty()) throw ValidationError("crop: box does not intersect the grid");
  return idx;
}

GridSpec crop_grid(const GridSpec& grid, const CropIndices& idx) {
  std::vector<double> lats, lons;
  for (auto i : idx.rows) lats.push_back(grid.lat(i));
  for (auto j : idx.cols) lons.push_back(grid.lon(j));
  return GridSpec(std::move(lats), std::move(lons));
}

}  // namespace gridformer
