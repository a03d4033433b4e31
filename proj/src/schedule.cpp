#include "maskfuse/schedule.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace maskfuse {

Schedule Schedule::discrete(int steps) {
    if (steps < 2) {
        throw ConfigError("discrete schedule requires at least 2 steps");
    }
    return {ScheduleKind::Discrete, steps};
}

namespace {

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw DomainError("schedule time " + std::to_string(t) + " outside [0,1]");
    }
}

// Discrete times snap up to the next grid point so every t > 0 lands on k >= 1.
int grid_index(double t, int steps) {
    const double scaled = t * steps;
    int k = static_cast<int>(std::ceil(scaled - 1e-9));
    return std::clamp(k, 0, steps);
}

} // namespace

double Schedule::alpha(double t) const {
    check_time(t);
    switch (kind) {
    case ScheduleKind::Linear:
        return 1.0 - t;
    case ScheduleKind::Cosine:
        return t >= 1.0 ? 0.0 : std::cos(std::numbers::pi * t / 2.0);
    case ScheduleKind::Discrete:
        return 1.0 - static_cast<double>(grid_index(t, discrete_steps)) / discrete_steps;
    }
    return 1.0 - t;
}

Schedule parse_schedule(const std::string & name, int discrete_steps) {
    if (name == "linear") {
        return Schedule::linear();
    }
    if (name == "cosine") {
        return Schedule::cosine();
    }
    if (name == "discrete") {
        return Schedule::discrete(discrete_steps);
    }
    throw ConfigError("unknown schedule kind '" + name + "'");
}

std::string schedule_name(const Schedule & s) {
    switch (s.kind) {
    case ScheduleKind::Linear:
        return "linear";
    case ScheduleKind::Cosine:
        return "cosine";
    case ScheduleKind::Discrete:
        return "discrete";
    }
    return "linear";
}

ScheduleEval eval_schedule(const Schedule & schedule, double t) {
    check_time(t);
    ScheduleEval e;
    e.t = t;
    switch (schedule.kind) {
    case ScheduleKind::Linear:
        e.alpha  = 1.0 - t;
        e.dalpha = -1.0;
        break;
    case ScheduleKind::Cosine: {
        const double half_pi = std::numbers::pi / 2.0;
        e.alpha              = t >= 1.0 ? 0.0 : std::cos(half_pi * t);
        e.dalpha             = -half_pi * std::sin(half_pi * t);
        break;
    }
    case ScheduleKind::Discrete: {
        // alpha_k - alpha_{k-1} on the grid, expressed per unit time so the
        // weight is on the same scale as the continuous schedules.
        const int steps  = schedule.discrete_steps;
        const int k      = grid_index(t, steps);
        e.t              = static_cast<double>(k) / steps;
        e.alpha          = 1.0 - e.t;
        const double prev = 1.0 - static_cast<double>(std::max(k - 1, 0)) / steps;
        e.dalpha          = k == 0 ? -1.0 : (e.alpha - prev) * steps;
        break;
    }
    }
    e.weight = loss_weight(e, kDefaultWeightClamp);
    return e;
}

double loss_weight(const ScheduleEval & eval, std::optional<double> clamp) {
    const double denom = 1.0 - eval.alpha;
    if (denom <= 0.0) {
        if (clamp) {
            return *clamp;
        }
        throw DomainError("unclamped loss weight diverges at alpha = 1");
    }
    const double raw = -eval.dalpha / denom;
    return clamp ? std::min(raw, *clamp) : raw;
}

} // namespace maskfuse
