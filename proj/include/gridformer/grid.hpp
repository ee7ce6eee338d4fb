#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gridformer {

// Latitude/longitude geometry of a regular grid. Latitudes are monotonic in
// either direction. Longitudes are equispaced modulo 360; a grid whose
// longitudes close the circle is periodic (global), otherwise regional.
class GridSpec {
 public:
  GridSpec() = default;
  GridSpec(std::vector<double> lats, std::vector<double> lons);

  // Equiangular global grid with cell-centred latitudes, ascending, and
  // longitudes starting at 0.
  static GridSpec global(std::size_t height, std::size_t width);

  std::size_t height() const { return lats_.size(); }
  std::size_t width() const { return lons_.size(); }
  std::size_t cells() const { return lats_.size() * lons_.size(); }
  const std::vector<double>& lats() const { return lats_; }
  const std::vector<double>& lons() const { return lons_; }
  double lat(std::size_t i) const { return lats_[i]; }
  double lon(std::size_t j) const { return lons_[j]; }
  double lon_spacing() const { return lon_step_; }
  bool periodic() const { return periodic_; }

  bool operator==(const GridSpec& other) const { return lats_ == other.lats_ && lons_ == other.lons_; }

 private:
  std::vector<double> lats_;
  std::vector<double> lons_;
  double lon_step_ = 360.0;
  bool periodic_ = false;
};

// The ordered set of variable names a model knows about.
class VariableVocabulary {
 public:
  VariableVocabulary() = default;
  explicit VariableVocabulary(std::vector<std::string> names);

  void add(const std::string& name);
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;  // throws on unknown
  bool contains(const std::string& name) const { return find(name).has_value(); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const VariableVocabulary&) const = default;

 private:
  std::vector<std::string> names_;
};

// Bilinear interpolation of `channels` stacked fields from grid `from` onto
// grid `to`. Latitudes outside the source range clamp to the edge rows;
// longitudes wrap when the source is periodic.
std::vector<float> regrid_bilinear(std::span<const float> fields, std::size_t channels, const GridSpec& from,
                                   const GridSpec& to);

// Corner-aligned bilinear resize of an [h1, w1, channels] array to [h2, w2, channels].
std::vector<double> resize_bilinear(std::span<const double> values, std::size_t h1, std::size_t w1,
                                    std::size_t channels, std::size_t h2, std::size_t w2);

// Index sets selected by a closed lat/lon box. lon_min > lon_max wraps
// through 0 and columns are returned in wrapped order.
struct CropIndices {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> cols;
};

CropIndices crop_indices(const GridSpec& grid, double lat_min, double lat_max, double lon_min, double lon_max);
GridSpec crop_grid(const GridSpec& grid, const CropIndices& idx);

}  // namespace gridformer
