#pragma once

// Training objectives and their schedules.
//
//   consistency   L_c = 1 - (1/K) sum_i 2 sum_v a_iv b_iv / (sum_v a_iv + sum_v b_iv)
//   segmentation  L_s = -(1/V) sum_v sum_i Y_iv log p_iv
//   total         L   = L_s + beta(S) L_c
//   ramp-up       beta(S) = exp(-5 (1 - S/L)^2) for S <= L, else 1
//   EMA decay     alpha(S) = 0.99 for S <= L, else 0.999

#include <cstdint>
#include <span>

#include "mtseg/domain.hpp"

namespace mtseg {

// Added to each per-class Dice numerator and denominator; a class absent from
// both maps then scores 1 (agreement on absence).
inline constexpr double kDiceSmoothing = 1e-6;

// Probabilities are clamped to [eps, 1 - eps] before the logarithm.
inline constexpr double kLogClamp = 1e-7;

struct ConsistencyOptions {
    // Average the Dice terms over all K channels (default) or skip channel 0.
    bool include_background = true;
};

double consistency_loss(const ProbabilityMap& student, const ProbabilityMap& teacher,
                        const ConsistencyOptions& opts = {});

// d L_c / d student, teacher held constant.
ProbabilityMap consistency_loss_gradient(const ProbabilityMap& student, const ProbabilityMap& teacher,
                                         const ConsistencyOptions& opts = {});

double segmentation_loss(const ProbabilityMap& p, const LabelMap& y);

// d L_s / d p for the clamped loss.
ProbabilityMap segmentation_loss_gradient(const ProbabilityMap& p, const LabelMap& y);

struct RampSchedule {
    std::int64_t ramp_length = 400;
};

struct EmaSchedule {
    std::int64_t ramp_length = 400;
    double alpha_rampup = 0.99;
    double alpha_after = 0.999;
};

double beta(std::int64_t step, const RampSchedule& sched);
double total_loss(double ls, double lc, std::int64_t step, const RampSchedule& sched);
double alpha(std::int64_t step, const EmaSchedule& sched);

}  // namespace mtseg
