// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <new>
#include <vector>

namespace wisteria::memory {

// Process-wide accounting of tensor storage. All tensor payloads, gradients
// and op scratch buffers go through TrackingAllocator, so current/peak
// figures describe the library's own working set.
std::int64_t current_bytes() noexcept;
std::int64_t peak_bytes() noexcept;

// Resets the peak watermark to the current live byte count.
void reset_peak() noexcept;

// Allocations that would push the live byte count above the limit throw
// std::bad_alloc. Zero disables the limit.
void set_limit(std::int64_t bytes) noexcept;
std::int64_t limit() noexcept;

// Physical memory of the host, or 0 when it cannot be determined.
std::int64_t physical_bytes() noexcept;

// Asks the C allocator to keep freed pages mapped instead of returning
// them to the OS after every step. Training reuses the same large buffers
// each step, so this removes most page-fault overhead.
void retain_freed_pages() noexcept;

void on_allocate(std::size_t bytes);
void on_deallocate(std::size_t bytes) noexcept;

// Blocks are cache-line aligned so vectorized reductions take the same
// path regardless of where the heap places a buffer.
inline constexpr std::size_t kTensorAlignment = 64;

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    on_allocate(n * sizeof(T));
    try {
      return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kTensorAlignment}));
    } catch (...) {
      on_deallocate(n * sizeof(T));
      throw;
    }
  }

  void deallocate(T* p, std::size_t n) noexcept {
    ::operator delete(p, n * sizeof(T), std::align_val_t{kTensorAlignment});
    on_deallocate(n * sizeof(T));
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace wisteria::memory

namespace wisteria {

using Buffer = std::vector<double, memory::TrackingAllocator<double>>;

}  // namespace wisteria
