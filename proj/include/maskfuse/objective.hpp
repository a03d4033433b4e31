#pragma once

#include "maskfuse/denoiser.hpp"
#include "maskfuse/guidance.hpp"
#include "maskfuse/schedule.hpp"
#include "maskfuse/transformer.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace maskfuse {

enum class LossNormalization {
    MaskedMean, // divide by the number of masked positions
    Sequence,   // divide by the sequence length (the ELBO normalization)
};

struct LossValue {
    double nats            = 0.0;
    bool degenerate        = false; // no supervised positions
    std::size_t supervised = 0;
};

// sum_i weight_i * CE(row_i, target_i) / normalizer over rows with target >= 0.
// Writes d loss / d logits when `dlogits` is given.
LossValue targeted_cross_entropy(const Logits & logits, std::span<const TokenId> targets, std::span<const double> row_weights,
                                 double normalizer, Logits * dlogits = nullptr);

struct DiffusionWeights {
    double text  = 1.0;
    double image = 1.0;
};

// weight * mean over masked positions of CE(logits, x0); visible positions contribute nothing.
LossValue diffusion_loss(const Logits & logits, const std::vector<TokenId> & x0, const MaskedSequence & x_t, double weight,
                         Logits * dlogits = nullptr);
LossValue diffusion_loss(const Logits & logits, const std::vector<TokenId> & x0, const MaskedSequence & x_t,
                         DiffusionWeights weights, LossNormalization norm, Logits * dlogits = nullptr);

// Mean next-token CE where row i predicts x[i] (see ar_predict). `supervise`
// selects rows; empty means all rows.
LossValue ar_loss(const Logits & next_token_logits, const std::vector<TokenId> & x, Logits * dlogits = nullptr,
                  std::span<const char> supervise = {});

struct ElboEstimate {
    double nats_per_token = 0.0;
    double std_error      = 0.0;
    int n_samples         = 0;
    std::size_t scored_tokens = 0;

    double perplexity() const { return std::exp(nats_per_token); }
};

struct ElboOptions {
    Schedule schedule;
    // When set, only this modality is diffused; the other stays visible.
    std::optional<Modality> scored_modality;
    // CFG on the conditional estimate: uncond logits hide the conditioning modality.
    double cfg_weight = 0.0;
    CfgSign cfg_sign  = CfgSign::Extrapolate;
    // Stratified times t_k = (k + u_k) / n; unbiased, lower variance.
    bool stratified = true;
};

// Monte-Carlo upper bound on -log p(x0) per scored token, using the
// unclamped weight -alpha'/(1 - alpha) and sequence normalization.
ElboEstimate elbo_estimate(const Denoiser & model, const MaskedSequence & x0, int n_mc, const ElboOptions & options, Rng & rng);
inline ElboEstimate elbo_estimate(const Denoiser & model, const MaskedSequence & x0, int n_mc, const Schedule & schedule,
                                  Rng & rng) {
    ElboOptions o;
    o.schedule = schedule;
    return elbo_estimate(model, x0, n_mc, o, rng);
}

enum class ScoreMode { Joint, ImageGivenText, TextGivenImage };

struct LikelihoodScore {
    double value     = 0.0; // -ELBO in nats over the scored tokens; higher is more likely
    double std_error = 0.0;
};

// `rng` is taken by value: scoring several candidates with copies of one
// stream gives them common random numbers.
LikelihoodScore joint_likelihood_score(const Denoiser & model, const MaskedSequence & x0, int n_mc, Rng rng,
                                       ScoreMode mode = ScoreMode::Joint, const Schedule & schedule = Schedule::linear(),
                                       double cfg_weight = 0.0);

// Exact -log p(x) under a causal model.
double ar_sequence_nll(const Transformer & model, const MaskedSequence & x);
// Exact -log p(target modality | other modality) under a causal model; the
// conditioning block is moved first, so the model must have seen that order.
double ar_conditional_nll(const Transformer & model, const MaskedSequence & x, Modality target);

} // namespace maskfuse
