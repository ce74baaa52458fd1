#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "earshot/tensor.hpp"

namespace earshot {

/// Named learnable tensors in registration order. A parameter is registered
/// once; every call site that reads it contributes to the same gradient.
template <typename Scalar>
class BasicParameterStore {
 public:
  using TensorT = BasicTensor<Scalar>;

  struct Entry {
    std::string name;
    TensorT value;
    TensorT grad;
  };

  TensorT& add(const std::string& name, TensorT init) {
    if (index_.count(name)) {
      throw ConfigError("parameter '" + name + "' registered twice");
    }
    index_.emplace(name, entries_.size());
    TensorT grad(init.shape());
    entries_.push_back(Entry{name, std::move(init), std::move(grad)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ConfigError("unknown parameter '" + name + "'");
    }
    return it->second;
  }

  Entry& at(const std::string& name) { return entries_[index_of(name)]; }
  const Entry& at(const std::string& name) const { return entries_[index_of(name)]; }
  Entry& at(std::size_t i) { return entries_[i]; }
  const Entry& at(std::size_t i) const { return entries_[i]; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  /// Total number of scalar weights.
  Index parameter_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Scalar count over parameters whose name starts with `prefix`.
  Index parameter_count(const std::string& prefix) const {
    Index n = 0;
    for (const auto& e : entries_) {
      if (e.name.rfind(prefix, 0) == 0) n += e.value.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.set_zero();
  }

  /// Copies values from `other`; names and shapes must match exactly.
  void assign_values(const BasicParameterStore& other) {
    if (other.size() != size()) {
      throw ConfigError("parameter stores differ in size");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries_[i];
      auto& dst = entries_[i];
      if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
        throw ConfigError("parameter mismatch at '" + dst.name + "'");
      }
      dst.value = src.value;
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParameterStore = BasicParameterStore<double>;

/// Writes the "EARS" checkpoint format (version 1, little-endian).
void save_parameters(const ParameterStore& store, const std::filesystem::path& path);

/// Reads a checkpoint into a fresh store, preserving file order.
ParameterStore load_parameters(const std::filesystem::path& path);

/// Overwrites the values of `store` from a checkpoint. Every parameter of
/// `store` must be present with the same shape, and no extras are allowed.
void load_parameters_into(ParameterStore& store, const std::filesystem::path& path);

}  // namespace earshot
