#include "retrolab/params.hpp"

#include <stdexcept>

namespace retrolab {

Tensor& ParameterSet::create(const std::string& path, Tensor tensor, bool trainable) {
  auto [it, inserted] = entries_.emplace(path, ParamInfo{std::move(tensor), trainable});
  if (!inserted) throw std::invalid_argument("parameter path already exists: " + path);
  it->second.tensor.set_requires_grad(true);
  return it->second.tensor;
}

const Tensor& ParameterSet::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second.tensor;
}

Tensor& ParameterSet::at(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second.tensor;
}

void ParameterSet::set_trainable(const std::string& path, bool trainable) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter path: " + path);
  it->second.trainable = trainable;
}

bool ParameterSet::trainable(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second.trainable;
}

void ParameterSet::freeze_all() {
  for (auto& [path, info] : entries_) info.trainable = false;
}

std::size_t ParameterSet::total_param_count() const {
  std::size_t n = 0;
  for (const auto& [path, info] : entries_) n += info.tensor.numel();
  return n;
}

std::size_t ParameterSet::trainable_param_count() const {
  std::size_t n = 0;
  for (const auto& [path, info] : entries_)
    if (info.trainable) n += info.tensor.numel();
  return n;
}

void ParameterSet::for_each(const std::function<void(const std::string&, const ParamInfo&)>& fn) const {
  for (const auto& [path, info] : entries_) fn(path, info);
}

void ParameterSet::for_each(const std::function<void(const std::string&, ParamInfo&)>& fn) {
  for (auto& [path, info] : entries_) fn(path, info);
}

std::vector<std::string> ParameterSet::paths() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [path, info] : entries_) out.push_back(path);
  return out;
}

void ParameterSet::zero_grads() {
  for (auto& [path, info] : entries_) info.tensor.zero_grad();
}

}  // namespace retrolab
