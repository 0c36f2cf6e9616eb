#pragma once

// Learning-rate schedules with a linear warmup at the start of each cycle:
//   warmup:  lr = warmup_start + (peak - warmup_start) * e / warmup
//   cosine:  lr = min + (peak - min) * (1 + cos(pi * t / (period - warmup))) / 2
// where t counts epochs since the end of warmup. cosine_restart repeats the
// cycle every `period` epochs; cosine_anneal runs one cycle and then holds
// min_lr.

#include <cmath>
#include <numbers>
#include <string>

#include "deshadow/tensor.hpp"

namespace deshadow {

enum class ScheduleKind { cosine_restart, cosine_anneal };

inline std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::cosine_restart ? "cosine_restart" : "cosine_anneal";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "cosine_restart") return ScheduleKind::cosine_restart;
  if (s == "cosine_anneal") return ScheduleKind::cosine_anneal;
  throw Error("unknown schedule kind '" + s + "'");
}

struct Schedule {
  ScheduleKind kind = ScheduleKind::cosine_restart;
  double peak_lr = 1e-4;
  double min_lr = 5e-5;
  double period_epochs = 200.0;
  double warmup_epochs = 5.0;
  double warmup_start_lr = 1e-5;

  void validate() const {
    if (!(min_lr <= peak_lr)) throw Error("schedule: min_lr exceeds peak_lr");
    if (!(period_epochs > 0.0)) throw Error("schedule: period must be positive");
    if (!(warmup_epochs >= 0.0 && warmup_epochs < period_epochs)) {
      throw Error("schedule: warmup must be shorter than the period");
    }
  }

  bool operator==(const Schedule&) const = default;
};

/// Restart schedule used for single-stage pretraining.
inline Schedule restart_schedule() { return Schedule{}; }

/// Single cosine decay used for the final adaptation run.
inline Schedule anneal_schedule(double epochs) {
  return Schedule{ScheduleKind::cosine_anneal, 5e-5, 1e-6, epochs, 0.0, 5e-5};
}

inline double lr_at(const Schedule& s, double epoch) {
  if (!(epoch >= 0.0)) {
    throw Error("lr_at: epoch must be nonnegative, got " + std::to_string(epoch));
  }
  double e = epoch;
  if (s.kind == ScheduleKind::cosine_restart) {
    e = std::fmod(epoch, s.period_epochs);
  } else if (e >= s.period_epochs) {
    return s.min_lr;
  }
  if (e < s.warmup_epochs) {
    return s.warmup_start_lr + (s.peak_lr - s.warmup_start_lr) * e / s.warmup_epochs;
  }
  const double t = e - s.warmup_epochs;
  const double span = s.period_epochs - s.warmup_epochs;
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) *
                        (1.0 + std::cos(std::numbers::pi * t / span));
}

}  // namespace deshadow
