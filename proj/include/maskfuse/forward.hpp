#pragma once

#include "maskfuse/rng.hpp"
#include "maskfuse/schedule.hpp"
#include "maskfuse/vocab.hpp"

#include <span>
#include <vector>

namespace maskfuse {

// Dense row-stochastic matrix, row = source token, column = destination.
// Only meant for small-vocab verification of the absorbing kernel.
struct TransitionMatrix {
    std::size_t size = 0;
    std::vector<double> entries;

    double at(std::size_t i, std::size_t j) const { return entries[i * size + j]; }
    double & at(std::size_t i, std::size_t j) { return entries[i * size + j]; }

    TransitionMatrix operator*(const TransitionMatrix & rhs) const;
    double max_abs_diff(const TransitionMatrix & other) const;
};

// alpha on the diagonal for clean ids, 1 - alpha into the mask column, mask row absorbing.
TransitionMatrix transition_matrix(double alpha, const JointVocab & vocab);
TransitionMatrix compose_transitions(std::span<const double> alphas, const JointVocab & vocab);

struct TimestepPair {
    double t_text  = 0.0;
    double t_image = 0.0;
    double delta   = 0.0;
};

struct OffsetConfig {
    double k_ratio = 10.0;
    int n_min      = 50;
    int n_max      = 1000;
};

// t_text ~ U(0,1), delta ~ U(K/N_max, K/N_min), t_image ~ U(max(0, t_text - delta), t_text).
TimestepPair sample_timestep_pair(double k_ratio, int n_min, int n_max, Rng & rng);
inline TimestepPair sample_timestep_pair(const OffsetConfig & c, Rng & rng) {
    return sample_timestep_pair(c.k_ratio, c.n_min, c.n_max, rng);
}

// The same construction with t_text and delta given; `u` in [0,1) picks t_image.
TimestepPair timestep_pair_from(double t_text, double delta, double u);

// Independently masks each text token with probability 1 - alpha(t_text) and
// each image token with probability 1 - alpha(t_image). One uniform is drawn
// per position in index order.
MaskedSequence corrupt(const MaskedSequence & x0, const TimestepPair & pair, const Schedule & schedule, const JointVocab & vocab,
                       Rng & rng);

// Masks with keep probability `alpha` applied to every position; already
// masked positions stay masked. Used to chain forward steps.
MaskedSequence corrupt_with_alpha(const MaskedSequence & x, double alpha_text, double alpha_image, const JointVocab & vocab,
                                  Rng & rng);

inline constexpr double kDefaultUncondProb = 0.1;

// With probability p_uncond masks every position of one modality, chosen by a
// fair coin (coin < 0.5 selects the image).
MaskedSequence cfg_dropout(const MaskedSequence & x_t, double p_uncond, const JointVocab & vocab, Rng & rng);

MaskedSequence mask_modality(const MaskedSequence & x, Modality m, const JointVocab & vocab);

} // namespace maskfuse
