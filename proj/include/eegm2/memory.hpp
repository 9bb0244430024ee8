#pragma once

#include <atomic>
#include <cstddef>

#include "eegm2/error.hpp"

namespace eegm2::memory {

// Global accounting of live tensor storage. Every Storage<S> registers its
// byte count here on construction and releases it on destruction, so the
// high-water mark reflects exactly the bytes held by tensors at any moment.
// A nonzero cap turns oversized requests into OomError before any physical
// allocation happens.
class Meter {
 public:
  static Meter& instance() {
    static Meter m;
    return m;
  }

  void add(std::size_t bytes) {
    std::size_t cap = cap_.load(std::memory_order_relaxed);
    std::size_t cur = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    if (cap != 0 && cur > cap) {
      current_.fetch_sub(bytes, std::memory_order_relaxed);
      throw OomError(bytes, cur - bytes, cap);
    }
    std::size_t prev = peak_.load(std::memory_order_relaxed);
    while (cur > prev &&
           !peak_.compare_exchange_weak(prev, cur, std::memory_order_relaxed)) {
    }
  }

  void sub(std::size_t bytes) { current_.fetch_sub(bytes, std::memory_order_relaxed); }

  std::size_t current() const { return current_.load(std::memory_order_relaxed); }
  std::size_t peak() const { return peak_.load(std::memory_order_relaxed); }

  /// Resets the high-water mark to the current live byte count.
  void reset_peak() { peak_.store(current(), std::memory_order_relaxed); }

  /// 0 disables the cap.
  void set_cap(std::size_t bytes) { cap_.store(bytes, std::memory_order_relaxed); }
  std::size_t cap() const { return cap_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
  std::atomic<std::size_t> cap_{0};
};

/// Scoped memory cap; restores the previous cap on exit.
class CapGuard {
 public:
  explicit CapGuard(std::size_t cap_bytes) : prev_(Meter::instance().cap()) {
    Meter::instance().set_cap(cap_bytes);
  }
  ~CapGuard() { Meter::instance().set_cap(prev_); }
  CapGuard(const CapGuard&) = delete;
  CapGuard& operator=(const CapGuard&) = delete;

 private:
  std::size_t prev_;
};

}  // namespace eegm2::memory
