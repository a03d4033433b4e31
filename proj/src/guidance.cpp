#include "maskfuse/guidance.hpp"

#include "maskfuse/errors.hpp"

#include <cmath>

namespace maskfuse {

Logits cfg_blend(const Logits & cond, const Logits & uncond, double w, CfgSign sign) {
    if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols()) {
        throw StructuralError("cfg_blend: logit shapes differ");
    }
    if (w == 0.0) {
        return cond;
    }
    Logits out(cond.rows(), cond.cols());
    const double s = sign == CfgSign::Extrapolate ? -w : w;
    const auto & c = cond.values();
    const auto & u = uncond.values();
    auto & o       = out.values();
    for (std::size_t i = 0; i < c.size(); ++i) {
        o[i] = is_suppressed(c[i]) || is_suppressed(u[i]) ? kSuppressedLogit : (1.0 + w) * c[i] + s * u[i];
    }
    return out;
}

double logit_gap(const Logits & cond, const Logits & uncond, const std::vector<std::size_t> & rows) {
    if (rows.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t i : rows) {
        auto c    = cond.row(i);
        auto u    = uncond.row(i);
        double ss = 0.0;
        for (std::size_t j = 0; j < c.size(); ++j) {
            if (is_suppressed(c[j]) || is_suppressed(u[j])) {
                continue;
            }
            const double diff = c[j] - u[j];
            ss += diff * diff;
        }
        total += std::sqrt(ss);
    }
    return total / static_cast<double>(rows.size());
}

} // namespace maskfuse
