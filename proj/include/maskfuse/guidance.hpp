#pragma once

#include "maskfuse/logits.hpp"

namespace maskfuse {

inline constexpr double kDefaultCfgWeight = 1.5;

enum class CfgSign {
    Extrapolate, // (1 + w) cond - w uncond
    AsPrinted,   // (1 + w) cond + w uncond, for comparison only
};

// w == 0 returns cond unchanged. Entries suppressed in either input stay suppressed.
Logits cfg_blend(const Logits & cond, const Logits & uncond, double w, CfgSign sign = CfgSign::Extrapolate);

// Mean over `rows` of the L2 distance between cond and uncond rows,
// ignoring entries suppressed in either input.
double logit_gap(const Logits & cond, const Logits & uncond, const std::vector<std::size_t> & rows);

} // namespace maskfuse
