#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dubd/tensor.hpp"

namespace dubd {

/// Named learnable tensors in declaration order.
template <typename T>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  /// Adds `t` under `name` and marks it as requiring grad.
  Tensor<T>& add(std::string name, Tensor<T> t) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }

  [[nodiscard]] const Tensor<T>& get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return entries_[it->second].second;
  }
  [[nodiscard]] Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(name));
  }
  [[nodiscard]] const Tensor<T>& operator[](const std::string& name) const { return get(name); }

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] auto begin() const { return entries_.begin(); }
  [[nodiscard]] auto end() const { return entries_.end(); }
  [[nodiscard]] auto begin() { return entries_.begin(); }
  [[nodiscard]] auto end() { return entries_.end(); }

  /// Total number of scalar parameters.
  [[nodiscard]] std::size_t numel() const {
    std::size_t total = 0;
    for (const auto& [name, t] : entries_) total += t.numel();
    return total;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  /// Deep copy with independent storage.
  [[nodiscard]] ParameterSet clone() const {
    ParameterSet out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone());
    return out;
  }

  template <typename U>
  [[nodiscard]] ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  /// Turns grad tracking on or off for every parameter (off for frozen inference).
  void set_requires_grad(bool on) {
    for (auto& [name, t] : entries_) t.set_requires_grad(on);
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dubd
