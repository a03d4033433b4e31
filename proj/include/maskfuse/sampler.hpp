#pragma once

#include "maskfuse/denoiser.hpp"
#include "maskfuse/guidance.hpp"
#include "maskfuse/objective.hpp"
#include "maskfuse/schedule.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace maskfuse {

enum class Strategy { MaskGit, Ddpm, OnePerStep };
enum class ConfidenceMode { PostFilter, PreFilter };
enum class CfgCondition { Auto, None, Text, Image };

// Linear anneal from `start` at the first step to `end` at the last.
struct TemperatureSchedule {
    double start = 1.0;
    double end   = 0.0;

    static TemperatureSchedule constant(double tau) { return {tau, tau}; }
    double at(int step, int total_steps) const;
};

struct SamplerConfig {
    int steps          = 16;
    Strategy strategy  = Strategy::MaskGit;
    int top_k          = 0;   // 0: off
    double top_p       = 1.0; // 1: off
    TemperatureSchedule temperature;
    double cfg_weight  = kDefaultCfgWeight;
    CfgSign cfg_sign   = CfgSign::Extrapolate;
    CfgCondition cfg_condition = CfgCondition::Auto;
    // CFG applied only on step indices in [first, second); none = every step.
    std::optional<std::pair<int, int>> cfg_step_window;
    int cache_period   = 0; // 0: no caching
    ConfidenceMode confidence = ConfidenceMode::PostFilter;
    Schedule schedule;
    std::uint64_t seed = 0;
    bool trace_cfg_gap = false;

    void validate() const;
};

// Tokens revealed at step t_index (counting T down to 1) out of n_total masked:
// floor(f(t) * n_total) with f(t) = (1 - alpha_t) / sum_t' (1 - alpha_t'); the
// final step takes whatever is left so the quotas sum to n_total.
std::size_t unmask_quota(int t_index, int total_steps, const Schedule & schedule, std::size_t n_total);

struct SampledToken {
    TokenId token          = 0;
    double confidence      = 0.0; // probability under the filtered, tempered distribution
    double prefilter_prob  = 0.0;
};

// Top-k or top-p filter, divide by tau, draw with one uniform. tau <= 1e-6 is argmax.
SampledToken sample_token(std::span<const double> logits, int top_k, double top_p, double tau, Rng & rng);

struct SamplerState {
    MaskedSequence sequence;
    std::size_t initial_masked = 0;
    std::size_t revealed       = 0;
};

SamplerState make_state(const MaskedSequence & initial, const JointVocab & vocab);

struct StepTrace {
    int step                = 0;
    std::size_t masked_count = 0; // after the step
    double mean_confidence  = 0.0;
    double cfg_gap          = 0.0;
    bool full_pass          = true;
};

// One MaskGIT step (step_index is 0-based, step t_index = T - step_index).
void maskgit_step(SamplerState & state, const Denoiser & model, const SamplerConfig & config, int step_index, Rng & rng);
// One DDPM-style step from time t to s < t.
void ddpm_step(SamplerState & state, const Denoiser & model, const SamplerConfig & config, double t, double s, Rng & rng);

struct GenerationResult {
    MaskedSequence sequence;
    std::vector<StepTrace> trace;
    int full_passes    = 0;
    int partial_passes = 0;
};

// Visible tokens of `initial` are clamped for every step.
GenerationResult generate(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config);
// Same, reusing image keys/values between refreshes every cache_period steps.
GenerationResult generate_cached(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config);

// Per-step mean L2 gap between conditional and unconditional logits on the
// currently masked positions. Length equals config.steps.
std::vector<double> cfg_logit_gap_trace(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config);

struct EditOptions {
    int n               = 4;
    double noise_level  = 0.3;
    bool fix_text       = false;
    int n_mc            = 64;
};

struct EditResult {
    MaskedSequence best;
    std::size_t best_index = 0;
    std::vector<MaskedSequence> candidates;
    std::vector<double> scores;
};

// Best-of-n editing: n independent noise masks at noise_level, each denoised
// and scored by the model's own likelihood; highest score wins (ties: lowest index).
EditResult edit_best_of_n(const Denoiser & model, const MaskedSequence & pair, const EditOptions & options,
                          const SamplerConfig & config, Rng & rng);

} // namespace maskfuse
