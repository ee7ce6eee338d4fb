#include "gridformer/param_store.hpp"

#include "gridformer/error.hpp"

namespace gridformer {

void ParamStore::add(const std::string& name, Tensor value) {
  if (name.empty()) throw ValidationError("parameter name must not be empty");
  if (!params_.emplace(name, std::move(value)).second) {
    throw ValidationError("duplicate parameter name '" + name + "'");
  }
}

void ParamStore::set(const std::string& name, Tensor value) { params_[name] = std::move(value); }

void ParamStore::erase(const std::string& name) { params_.erase(name); }

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : params_) out.params_.emplace(name, t.clone());
  return out;
}

}  // namespace gridformer
