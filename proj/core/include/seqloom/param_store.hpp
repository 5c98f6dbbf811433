// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "seqloom/tensor.hpp"

namespace seqloom {

// Named trainable parameters. Iteration order is lexicographic by name,
// which fixes the checkpoint serialization order.
class ParamStore {
 public:
  void insert(const std::string& name, Tensor value) {
    auto [it, ok] = params_.emplace(name, std::move(value));
    if (!ok) throw std::runtime_error("duplicate parameter: " + name);
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<std::pair<std::string, Shape>> manifest() const {
    std::vector<std::pair<std::string, Shape>> m;
    m.reserve(params_.size());
    for (const auto& [name, t] : params_) m.emplace_back(name, t.shape());
    return m;
  }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

 private:
  std::map<std::string, Tensor> params_;
};

}  // namespace seqloom
