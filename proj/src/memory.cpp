// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/memory.hpp"

#include <malloc.h>
#include <unistd.h>

#include <atomic>

namespace wisteria::memory {
namespace {

std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
std::atomic<std::int64_t> g_limit{0};

}  // namespace

std::int64_t current_bytes() noexcept { return g_current.load(); }

std::int64_t peak_bytes() noexcept { return g_peak.load(); }

void reset_peak() noexcept { g_peak.store(g_current.load()); }

void set_limit(std::int64_t bytes) noexcept { g_limit.store(bytes); }

std::int64_t limit() noexcept { return g_limit.load(); }

std::int64_t physical_bytes() noexcept {
  const long pages = sysconf(_SC_PHYS_PAGES);
  const long page_size = sysconf(_SC_PAGE_SIZE);
  if (pages <= 0 || page_size <= 0) return 0;
  return static_cast<std::int64_t>(pages) * page_size;
}

void retain_freed_pages() noexcept {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc maximum on 64-bit
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

void on_allocate(std::size_t bytes) {
  const auto n = static_cast<std::int64_t>(bytes);
  const std::int64_t now = g_current.fetch_add(n) + n;
  const std::int64_t cap = g_limit.load();
  if (cap > 0 && now > cap) {
    g_current.fetch_sub(n);
    throw std::bad_alloc();
  }
  std::int64_t seen = g_peak.load();
  while (now > seen && !g_peak.compare_exchange_weak(seen, now)) {
  }
}

void on_deallocate(std::size_t bytes) noexcept {
  g_current.fetch_sub(static_cast<std::int64_t>(bytes));
}

}  // namespace wisteria::memory
