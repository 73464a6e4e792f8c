#pragma once

#include <functional>
#include <map>
#include <string>

#include "retrolab/tensor.hpp"

namespace retrolab {

struct ParamInfo {
  Tensor tensor;
  bool trainable = true;
};

// Named map from parameter path (e.g. "dec.3.attn.wq") to tensor plus a
// trainable flag. Iteration order is the lexicographic path order, which
// keeps optimizer sweeps and serialization deterministic.
class ParameterSet {
 public:
  Tensor& create(const std::string& path, Tensor tensor, bool trainable = true);
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  bool contains(const std::string& path) const { return entries_.count(path) != 0; }

  void set_trainable(const std::string& path, bool trainable);
  bool trainable(const std::string& path) const;
  void freeze_all();

  std::size_t size() const { return entries_.size(); }
  std::size_t total_param_count() const;
  std::size_t trainable_param_count() const;

  void for_each(const std::function<void(const std::string&, const ParamInfo&)>& fn) const;
  void for_each(const std::function<void(const std::string&, ParamInfo&)>& fn);
  std::vector<std::string> paths() const;

  void zero_grads();

 private:
  std::map<std::string, ParamInfo> entries_;
};

}  // namespace retrolab
