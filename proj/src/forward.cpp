#include "maskfuse/forward.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace maskfuse {

TransitionMatrix TransitionMatrix::operator*(const TransitionMatrix & rhs) const {
    if (size != rhs.size) {
        throw StructuralError("transition matrix size mismatch");
    }
    TransitionMatrix out{size, std::vector<double>(size * size, 0.0)};
    for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t k = 0; k < size; ++k) {
            const double a = at(i, k);
            if (a == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < size; ++j) {
                out.at(i, j) += a * rhs.at(k, j);
            }
        }
    }
    return out;
}

double TransitionMatrix::max_abs_diff(const TransitionMatrix & other) const {
    if (size != other.size) {
        throw StructuralError("transition matrix size mismatch");
    }
    double m = 0.0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        m = std::max(m, std::abs(entries[i] - other.entries[i]));
    }
    return m;
}

TransitionMatrix transition_matrix(double alpha, const JointVocab & vocab) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw DomainError("alpha " + std::to_string(alpha) + " outside [0,1]");
    }
    const auto n   = static_cast<std::size_t>(vocab.total_size());
    const auto m   = static_cast<std::size_t>(vocab.mask_id());
    TransitionMatrix q{n, std::vector<double>(n * n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) {
        if (i == m) {
            q.at(i, i) = 1.0;
        } else {
            q.at(i, i) = alpha;
            q.at(i, m) = 1.0 - alpha;
        }
    }
    return q;
}

TransitionMatrix compose_transitions(std::span<const double> alphas, const JointVocab & vocab) {
    if (alphas.empty()) {
        throw PreconditionError("compose_transitions needs at least one step");
    }
    TransitionMatrix acc = transition_matrix(alphas[0], vocab);
    for (std::size_t k = 1; k < alphas.size(); ++k) {
        acc = acc * transition_matrix(alphas[k], vocab);
    }
    return acc;
}

TimestepPair sample_timestep_pair(double k_ratio, int n_min, int n_max, Rng & rng) {
    if (n_min < 1 || n_max < n_min || !(k_ratio > 0.0)) {
        throw ConfigError("timestep offset needs 1 <= n_min <= n_max and k_ratio > 0");
    }
    const double t_text = rng.uniform();
    const double lo     = k_ratio / n_max;
    const double hi     = k_ratio / n_min;
    const double delta  = lo == hi ? lo : rng.uniform(lo, hi);
    return timestep_pair_from(t_text, delta, rng.uniform());
}

TimestepPair timestep_pair_from(double t_text, double delta, double u) {
    if (!(t_text >= 0.0 && t_text <= 1.0) || !(delta >= 0.0)) {
        throw DomainError("invalid timestep pair inputs");
    }
    const double lo = std::max(0.0, t_text - delta);
    TimestepPair p;
    p.t_text  = t_text;
    p.delta   = delta;
    p.t_image = std::clamp(lo + (t_text - lo) * u, lo, t_text);
    return p;
}

MaskedSequence corrupt_with_alpha(const MaskedSequence & x, double alpha_text, double alpha_image, const JointVocab & vocab,
                                  Rng & rng) {
    MaskedSequence out = x;
    for (std::size_t i = 0; i < out.tokens.size(); ++i) {
        const double keep = x.layout->tag(i) == Modality::Text ? alpha_text : alpha_image;
        const double u    = rng.uniform();
        if (u >= keep) {
            out.tokens[i] = vocab.mask_id();
        }
    }
    return out;
}

MaskedSequence corrupt(const MaskedSequence & x0, const TimestepPair & pair, const Schedule & schedule, const JointVocab & vocab,
                       Rng & rng) {
    for (TokenId t : x0.tokens) {
        if (vocab.is_mask(t)) {
            throw PreconditionError("corrupt expects a clean sequence but found a mask token");
        }
    }
    MaskedSequence out = corrupt_with_alpha(x0, schedule.alpha(pair.t_text), schedule.alpha(pair.t_image), vocab, rng);
    out.t_text         = pair.t_text;
    out.t_image        = pair.t_image;
    return out;
}

MaskedSequence mask_modality(const MaskedSequence & x, Modality m, const JointVocab & vocab) {
    MaskedSequence out = x;
    for (std::size_t p : x.layout->positions(m)) {
        out.tokens[p] = vocab.mask_id();
    }
    if (m == Modality::Text) {
        out.t_text = 1.0;
    } else {
        out.t_image = 1.0;
    }
    return out;
}

MaskedSequence cfg_dropout(const MaskedSequence & x_t, double p_uncond, const JointVocab & vocab, Rng & rng) {
    if (!(rng.uniform() < p_uncond)) {
        return x_t;
    }
    const Modality dropped = rng.uniform() < 0.5 ? Modality::Image : Modality::Text;
    return mask_modality(x_t, dropped, vocab);
}

} // namespace maskfuse
