#pragma once

#include <map>
#include <string>

#include "gridformer/tensor.hpp"

namespace gridformer {

// Named parameters keyed by dot-separated path. std::map keeps iteration
// lexicographic, which fixes checkpoint layout and optimizer order.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Tensor value);
  void set(const std::string& name, Tensor value);
  void erase(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }

  void zero_grad();
  // Deep copy; graph handles are not shared with the source.
  ParamStore clone() const;

 private:
  Map params_;
};

}  // namespace gridformer
