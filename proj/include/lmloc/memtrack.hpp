#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <vector>

namespace lmloc::mem {

inline std::atomic<std::size_t>& current_bytes() {
  static std::atomic<std::size_t> v{0};
  return v;
}

inline std::atomic<std::size_t>& peak_bytes() {
  static std::atomic<std::size_t> v{0};
  return v;
}

inline void on_alloc(std::size_t n) {
  std::size_t cur = current_bytes().fetch_add(n) + n;
  std::size_t prev = peak_bytes().load();
  while (cur > prev && !peak_bytes().compare_exchange_weak(prev, cur)) {
  }
}

inline void on_free(std::size_t n) { current_bytes().fetch_sub(n); }

// Resets the high-water mark to the current live total.
inline void reset_peak() { peak_bytes().store(current_bytes().load()); }

template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    on_alloc(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) {
    on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  bool operator==(const TrackingAllocator&) const { return true; }
};

}  // namespace lmloc::mem

namespace lmloc {

// All bulk numeric storage goes through this type so the allocator
// high-water hook sees every tensor and volume buffer.
template <class T>
using Buffer = std::vector<T, mem::TrackingAllocator<T>>;

}  // namespace lmloc
