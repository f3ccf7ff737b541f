#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ivit/matrix.hpp"

namespace ivit {

/// Insertion-ordered collection of named matrices. Parameter stores,
/// gradient sets and checkpoint payloads all use this.
class NamedTensors {
 public:
  void set(const std::string& name, Matrix value) {
    if (auto it = index_.find(name); it != index_.end()) {
      entries_[it->second].second = std::move(value);
      return;
    }
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Matrix& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown tensor '" + name + "'");
    return entries_[it->second].second;
  }

  Matrix& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown tensor '" + name + "'");
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  bool operator==(const NamedTensors& o) const { return entries_ == o.entries_; }

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace ivit
