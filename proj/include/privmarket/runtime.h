// Copyright 2026 The privmarket Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Process-level helpers: seed derivation, version string, wall clock and
// allocator tuning.

#ifndef PRIVMARKET_RUNTIME_H_
#define PRIVMARKET_RUNTIME_H_

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#ifndef PRIVMARKET_VERSION
#define PRIVMARKET_VERSION "v0.1.0"
#endif

namespace privmarket {

inline const char* VersionString() { return PRIVMARKET_VERSION; }

inline uint64_t SplitMix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for a (base, key...) tuple; order matters.
inline uint64_t DeriveSeed(uint64_t base, std::initializer_list<uint64_t> keys) {
  uint64_t h = SplitMix64(base);
  for (uint64_t k : keys) h = SplitMix64(h ^ SplitMix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

// Batched evaluation allocates and frees multi-megabyte temporaries at a
// high rate. glibc serves those with fresh mmap pages by default, and the
// resulting page faults dominate small-network runtime. Raising the mmap and
// trim thresholds keeps them on the heap. Idempotent; no-op off glibc.
inline void TuneAllocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

// High-water resident set size in MiB from /proc; 0 where unavailable.
inline double PeakRssMb() {
  std::ifstream status("/proc/self/status");
  std::string key;
  while (status >> key) {
    if (key == "VmHWM:") {
      double kb = 0.0;
      status >> kb;
      return kb / 1024.0;
    }
    std::getline(status, key);
  }
  return 0.0;
}

// Runs fn(0..count-1) on at most `jobs` threads. Work items must write to
// disjoint outputs; the first exception thrown is rethrown here.
inline void ParallelFor(int count, int jobs, const std::function<void(int)>& fn) {
  const int workers = std::clamp(jobs, 1, std::max(count, 1));
  if (workers <= 1) {
    for (int k = 0; k < count; ++k) fn(k);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int k = next++; k < count; k = next++) {
        try {
          fn(k);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double Seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }
  void Reset() { start_ = std::chrono::steady_clock::now(); }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace privmarket

#endif  // PRIVMARKET_RUNTIME_H_
