#include "mtseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace mtseg {

namespace {

void require_valid(const ProbabilityMap& p, const char* what) {
    if (!validate_probability_map(p)) {
        throw PreconditionError(std::string(what) + " is not a valid probability map");
    }
}

void require_same_shape(const ProbabilityMap& a, const ProbabilityMap& b) {
    if (a.num_classes != b.num_classes || a.shape != b.shape) {
        throw ShapeError("probability maps differ in shape: " + std::to_string(a.num_classes) + "x" +
                         to_string(a.shape) + " vs " + std::to_string(b.num_classes) + "x" +
                         to_string(b.shape));
    }
}

void require_label_shape(const ProbabilityMap& p, const LabelMap& y) {
    if (p.shape != y.shape() || p.num_classes != y.num_classes) {
        throw ShapeError("prediction " + std::to_string(p.num_classes) + "x" + to_string(p.shape) +
                         " does not match labels " + std::to_string(y.num_classes) + "x" +
                         to_string(y.shape()));
    }
}

int first_class(const ProbabilityMap& p, const ConsistencyOptions& opts) {
    const int first = opts.include_background ? 0 : 1;
    if (first >= p.num_classes) throw ShapeError("no foreground channel to average over");
    return first;
}

double clamp_probability(double p) { return std::clamp(p, kLogClamp, 1.0 - kLogClamp); }

}  // namespace

double consistency_loss(const ProbabilityMap& student, const ProbabilityMap& teacher,
                        const ConsistencyOptions& opts) {
    require_same_shape(student, teacher);
    require_valid(student, "student prediction");
    require_valid(teacher, "teacher prediction");
    const int first = first_class(student, opts);
    double dice_sum = 0.0;
    for (int i = first; i < student.num_classes; ++i) {
        const auto a = student.channel(i);
        const auto b = teacher.channel(i);
        double inter = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t v = 0; v < a.size(); ++v) {
            inter += a[v] * b[v];
            sa += a[v];
            sb += b[v];
        }
        dice_sum += (2.0 * inter + kDiceSmoothing) / (sa + sb + kDiceSmoothing);
    }
    return 1.0 - dice_sum / (student.num_classes - first);
}

ProbabilityMap consistency_loss_gradient(const ProbabilityMap& student, const ProbabilityMap& teacher,
                                         const ConsistencyOptions& opts) {
    require_same_shape(student, teacher);
    const int first = first_class(student, opts);
    const double scale = 1.0 / (student.num_classes - first);
    ProbabilityMap g(student.num_classes, student.shape, 0.0);
    for (int i = first; i < student.num_classes; ++i) {
        const auto a = student.channel(i);
        const auto b = teacher.channel(i);
        double inter = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t v = 0; v < a.size(); ++v) {
            inter += a[v] * b[v];
            sa += a[v];
            sb += b[v];
        }
        const double num = 2.0 * inter + kDiceSmoothing;
        const double den = sa + sb + kDiceSmoothing;
        // d/da_v (num/den) = (2 b_v den - num) / den^2
        for (std::size_t v = 0; v < a.size(); ++v) {
            g.at(i, v) = -scale * (2.0 * b[v] * den - num) / (den * den);
        }
    }
    return g;
}

double segmentation_loss(const ProbabilityMap& p, const LabelMap& y) {
    require_label_shape(p, y);
    require_valid(p, "prediction");
    const auto labels = y.labels.values();
    double sum = 0.0;
    for (std::size_t v = 0; v < labels.size(); ++v) {
        sum -= std::log(clamp_probability(p.at(labels[v], v)));
    }
    return sum / static_cast<double>(labels.size());
}

ProbabilityMap segmentation_loss_gradient(const ProbabilityMap& p, const LabelMap& y) {
    require_label_shape(p, y);
    const auto labels = y.labels.values();
    const double inv_v = 1.0 / static_cast<double>(labels.size());
    ProbabilityMap g(p.num_classes, p.shape, 0.0);
    for (std::size_t v = 0; v < labels.size(); ++v) {
        const double pv = p.at(labels[v], v);
        if (pv > kLogClamp && pv < 1.0 - kLogClamp) g.at(labels[v], v) = -inv_v / pv;
    }
    return g;
}

double beta(std::int64_t step, const RampSchedule& sched) {
    if (step < 0) throw PreconditionError("step must be nonnegative");
    if (sched.ramp_length <= 0 || step >= sched.ramp_length) return 1.0;
    const double r = 1.0 - static_cast<double>(step) / static_cast<double>(sched.ramp_length);
    return std::exp(-5.0 * r * r);
}

double total_loss(double ls, double lc, std::int64_t step, const RampSchedule& sched) {
    return ls + beta(step, sched) * lc;
}

double alpha(std::int64_t step, const EmaSchedule& sched) {
    if (step < 1) throw PreconditionError("EMA decay is defined for steps >= 1");
    return step <= sched.ramp_length ? sched.alpha_rampup : sched.alpha_after;
}

}  // namespace mtseg
