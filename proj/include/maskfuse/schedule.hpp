#pragma once

#include <optional>
#include <string>

namespace maskfuse {

enum class ScheduleKind { Linear, Cosine, Discrete };

struct Schedule {
    ScheduleKind kind  = ScheduleKind::Linear;
    int discrete_steps = 1000; // only read for Discrete

    static Schedule linear() { return {ScheduleKind::Linear, 1000}; }
    static Schedule cosine() { return {ScheduleKind::Cosine, 1000}; }
    static Schedule discrete(int steps);

    // alpha(t) only; cheaper than eval_schedule when the derivative is not needed.
    double alpha(double t) const;
};

Schedule parse_schedule(const std::string & name, int discrete_steps = 1000);
std::string schedule_name(const Schedule & s);

inline constexpr double kDefaultWeightClamp = 5.0;

struct ScheduleEval {
    double t      = 0.0;
    double alpha  = 1.0; // keep probability
    double dalpha = 0.0; // d alpha / dt, <= 0
    double weight = 0.0; // loss_weight(*this, kDefaultWeightClamp)
};

// Throws DomainError for t outside [0,1].
ScheduleEval eval_schedule(const Schedule & schedule, double t);

// min(-dalpha / (1 - alpha), clamp). With no clamp the raw MDLM weight is
// returned; that diverges at alpha == 1 and DomainError is thrown there.
double loss_weight(const ScheduleEval & eval, std::optional<double> clamp = kDefaultWeightClamp);

} // namespace maskfuse
