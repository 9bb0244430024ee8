#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eegm2/graph.hpp"
#include "eegm2/rng.hpp"

namespace eegm2 {

/// Named registry of learnable leaf Vars. Modules register their parameters
/// here so the optimizer, checkpointing, counting and hashing all see one
/// flat ordered list.
template <class S>
class ParamSet {
 public:
  /// Registers a parameter; the returned Var aliases the stored one (copies
  /// share the underlying node).
  Var<S> add(const std::string& name, Var<S> v) {
    entries_.emplace_back(name, std::move(v));
    return entries_.back().second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Var<S>& var(std::size_t i) { return entries_[i].second; }
  const Var<S>& var(std::size_t i) const { return entries_[i].second; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  int64_t count_scalars() const {
    int64_t n = 0;
    for (const auto& [name, v] : entries_) n += v.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, v] : entries_) v.zero_grad();
  }

  /// FNV-1a over raw parameter bytes in registration order; detects any
  /// parameter mutation.
  uint64_t content_hash() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, v] : entries_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.value().data());
      const std::size_t nb = static_cast<std::size_t>(v.value().numel()) * sizeof(S);
      for (std::size_t i = 0; i < nb; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Var<S>>> entries_;
};

namespace init {

template <class S>
Var<S> uniform_fan_in(Rng& rng, Shape shape, int64_t fan_in) {
  Tensor<S> t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  return Var<S>::leaf(std::move(t));
}

template <class S>
Var<S> zeros(Shape shape) {
  return Var<S>::leaf(Tensor<S>::zeros(std::move(shape)));
}

template <class S>
Var<S> ones(Shape shape) {
  return Var<S>::leaf(Tensor<S>::full(std::move(shape), S(1)));
}

}  // namespace init

}  // namespace eegm2
