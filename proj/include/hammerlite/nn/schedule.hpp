#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

namespace hammerlite::nn {

// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0
// at `total`.
struct LrSchedule {
  double peak = 2e-4;
  std::int64_t warmup = 0;
  std::int64_t total = 1;

  void validate() const {
    if (warmup < 0 || warmup > total) throw std::invalid_argument("LrSchedule: need 0 <= warmup <= total");
  }
};

inline double lr_at(const LrSchedule& s, std::int64_t step) {
  s.validate();
  if (step < 0 || step > s.total) throw std::out_of_range("lr_at: step outside [0, total]");
  if (s.warmup > 0 && step <= s.warmup)
    return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup);
  if (s.total == s.warmup) return s.peak;
  const double progress =
      static_cast<double>(step - s.warmup) / static_cast<double>(s.total - s.warmup);
  return s.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Warmup covering `fraction` of the run, rounded to whole steps.
inline LrSchedule warmup_cosine(double peak, std::int64_t total, double fraction) {
  LrSchedule s{peak, static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(total))), total};
  s.validate();
  return s;
}

}  // namespace hammerlite::nn
