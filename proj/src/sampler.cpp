#include "maskfuse/sampler.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/forward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace maskfuse {

double TemperatureSchedule::at(int step, int total_steps) const {
    if (total_steps <= 1) {
        return start;
    }
    const double frac = static_cast<double>(step) / (total_steps - 1);
    return std::max(0.0, start + (end - start) * frac);
}

void SamplerConfig::validate() const {
    if (steps < 1) {
        throw ConfigError("sampler needs at least one step");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw ConfigError("top_p must lie in (0, 1]");
    }
    if (top_k < 0) {
        throw ConfigError("top_k must be nonnegative");
    }
    if (top_k > 0 && top_p < 1.0) {
        throw ConfigError("top_k and top_p cannot both be active");
    }
    if (!(cfg_weight >= 0.0)) {
        throw ConfigError("cfg weight must be nonnegative");
    }
    if (cache_period < 0) {
        throw ConfigError("cache period must be nonnegative");
    }
    if (temperature.start < 0.0 || temperature.end < 0.0) {
        throw ConfigError("temperature must be nonnegative");
    }
}

std::size_t unmask_quota(int t_index, int total_steps, const Schedule & schedule, std::size_t n_total) {
    if (total_steps < 1 || t_index < 1 || t_index > total_steps) {
        throw DomainError("unmask_quota: step index outside [1, T]");
    }
    if (n_total == 0) {
        return 0;
    }
    double denom = 0.0;
    for (int k = 1; k <= total_steps; ++k) {
        denom += 1.0 - schedule.alpha(static_cast<double>(k) / total_steps);
    }
    auto floor_quota = [&](int k) {
        const double f = (1.0 - schedule.alpha(static_cast<double>(k) / total_steps)) / denom;
        return static_cast<std::size_t>(std::floor(f * static_cast<double>(n_total) + 1e-9));
    };
    if (t_index > 1) {
        return std::min(floor_quota(t_index), n_total);
    }
    std::size_t before = 0;
    for (int k = 2; k <= total_steps; ++k) {
        before += floor_quota(k);
    }
    return before >= n_total ? 0 : n_total - before;
}

SampledToken sample_token(std::span<const double> logits, int top_k, double top_p, double tau, Rng & rng) {
    const std::vector<double> pre = softmax(logits);
    std::vector<double> filtered(logits.begin(), logits.end());

    if (top_k > 0 || top_p < 1.0) {
        std::vector<std::size_t> order(pre.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pre[a] > pre[b]; });
        std::size_t keep = order.size();
        if (top_k > 0) {
            keep = std::min(keep, static_cast<std::size_t>(top_k));
        } else {
            double cum = 0.0;
            for (std::size_t r = 0; r < order.size(); ++r) {
                cum += pre[order[r]];
                if (cum >= top_p) {
                    keep = r + 1;
                    break;
                }
            }
        }
        keep = std::max<std::size_t>(keep, 1);
        for (std::size_t r = keep; r < order.size(); ++r) {
            filtered[order[r]] = kSuppressedLogit;
        }
    }

    const double u = rng.uniform();
    SampledToken out;
    if (tau <= 1e-6) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < filtered.size(); ++j) {
            if (filtered[j] > filtered[best]) {
                best = j;
            }
        }
        out.token          = static_cast<TokenId>(best);
        out.confidence     = 1.0;
        out.prefilter_prob = pre[best];
        return out;
    }
    for (double & x : filtered) {
        if (!is_suppressed(x)) {
            x /= tau;
        }
    }
    const std::vector<double> p = softmax(filtered);
    double cum                  = 0.0;
    std::size_t pick            = p.size();
    std::size_t last_nonzero    = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (p[j] <= 0.0) {
            continue;
        }
        last_nonzero = j;
        cum += p[j];
        if (u < cum) {
            pick = j;
            break;
        }
    }
    if (pick == p.size()) {
        pick = last_nonzero; // rounding left u above the final cumulative sum
    }
    out.token          = static_cast<TokenId>(pick);
    out.confidence     = p[pick];
    out.prefilter_prob = pre[pick];
    return out;
}

SamplerState make_state(const MaskedSequence & initial, const JointVocab & vocab) {
    auto report = validate_sequence(initial, vocab);
    if (!report) {
        throw PreconditionError("sampler initial sequence invalid: " + report.message);
    }
    SamplerState s;
    s.sequence       = initial;
    s.initial_masked = initial.count_masked(vocab);
    return s;
}

namespace {

std::optional<Modality> resolve_condition(const MaskedSequence & initial, const JointVocab & vocab, CfgCondition c) {
    switch (c) {
    case CfgCondition::None:
        return std::nullopt;
    case CfgCondition::Text:
        return Modality::Text;
    case CfgCondition::Image:
        return Modality::Image;
    case CfgCondition::Auto:
        break;
    }
    const std::size_t masked_text  = initial.count_masked(vocab, Modality::Text);
    const std::size_t masked_image = initial.count_masked(vocab, Modality::Image);
    if (masked_text == 0 && masked_image > 0 && initial.layout->count(Modality::Text) > 0) {
        return Modality::Text;
    }
    if (masked_image == 0 && masked_text > 0 && initial.layout->count(Modality::Image) > 0) {
        return Modality::Image;
    }
    return std::nullopt;
}

bool cfg_active(const SamplerConfig & c, int step_index) {
    if (c.cfg_weight == 0.0) {
        return false;
    }
    if (!c.cfg_step_window) {
        return true;
    }
    return step_index >= c.cfg_step_window->first && step_index < c.cfg_step_window->second;
}

struct CacheSlots {
    ImageKvCache cond;
    ImageKvCache uncond;
};

struct StepLogits {
    Logits logits;
    double gap = 0.0;
};

// cache == nullptr: plain predict. Otherwise predict_cached with `refresh`.
StepLogits step_logits(const Denoiser & model, const MaskedSequence & seq, const SamplerConfig & config, int step_index,
                       std::optional<Modality> condition, CacheSlots * cache, bool refresh) {
    auto call = [&](const MaskedSequence & x, ImageKvCache * slot) {
        return slot ? model.predict_cached(x, *slot, refresh) : model.predict(x);
    };
    StepLogits out;
    out.logits            = call(seq, cache ? &cache->cond : nullptr);
    const bool want_cfg   = condition && cfg_active(config, step_index);
    const bool want_trace = condition && config.trace_cfg_gap;
    if (!want_cfg && !want_trace) {
        return out;
    }
    const Logits uncond = call(mask_modality(seq, *condition, model.vocab()), cache ? &cache->uncond : nullptr);
    if (want_trace) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
            if (model.vocab().is_mask(seq.tokens[i])) {
                rows.push_back(i);
            }
        }
        out.gap = logit_gap(out.logits, uncond, rows);
    }
    if (want_cfg) {
        out.logits = cfg_blend(out.logits, uncond, config.cfg_weight, config.cfg_sign);
    }
    return out;
}

std::vector<std::size_t> masked_positions(const MaskedSequence & seq, const JointVocab & vocab, bool text_only) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        if (vocab.is_mask(seq.tokens[i]) && (!text_only || seq.layout->tag(i) == Modality::Text)) {
            out.push_back(i);
        }
    }
    return out;
}

// Confidence-ordered reveal of at most `quota` candidates. Returns mean confidence of the revealed.
double apply_maskgit(SamplerState & state, const Logits & logits, const std::vector<std::size_t> & candidates,
                     std::size_t quota, const SamplerConfig & config, double tau, Rng & rng) {
    struct Cand {
        std::size_t pos;
        SampledToken s;
    };
    std::vector<Cand> cands;
    cands.reserve(candidates.size());
    for (std::size_t pos : candidates) {
        cands.push_back({pos, sample_token(logits.row(pos), config.top_k, config.top_p, tau, rng)});
    }
    const bool pre = config.confidence == ConfidenceMode::PreFilter;
    std::stable_sort(cands.begin(), cands.end(), [&](const Cand & a, const Cand & b) {
        const double ca = pre ? a.s.prefilter_prob : a.s.confidence;
        const double cb = pre ? b.s.prefilter_prob : b.s.confidence;
        if (ca != cb) {
            return ca > cb;
        }
        if (a.s.prefilter_prob != b.s.prefilter_prob) {
            return a.s.prefilter_prob > b.s.prefilter_prob;
        }
        return a.pos < b.pos;
    });
    const std::size_t m = std::min(quota, cands.size());
    double conf         = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        state.sequence.tokens[cands[r].pos] = cands[r].s.token;
        conf += pre ? cands[r].s.prefilter_prob : cands[r].s.confidence;
    }
    state.revealed += m;
    return m > 0 ? conf / static_cast<double>(m) : 0.0;
}

double apply_ddpm(SamplerState & state, const Logits & logits, const std::vector<std::size_t> & candidates, double reveal_prob,
                  const SamplerConfig & config, double tau, Rng & rng) {
    double conf     = 0.0;
    std::size_t n   = 0;
    for (std::size_t pos : candidates) {
        if (!(rng.uniform() < reveal_prob)) {
            continue;
        }
        const SampledToken s        = sample_token(logits.row(pos), config.top_k, config.top_p, tau, rng);
        state.sequence.tokens[pos]  = s.token;
        conf += s.confidence;
        ++n;
    }
    state.revealed += n;
    return n > 0 ? conf / static_cast<double>(n) : 0.0;
}

double ddpm_reveal_probability(const Schedule & schedule, double t, double s) {
    const double a_t = schedule.alpha(t);
    const double a_s = schedule.alpha(s);
    if (1.0 - a_t <= 0.0) {
        return 0.0;
    }
    return std::clamp((a_s - a_t) / (1.0 - a_t), 0.0, 1.0);
}

GenerationResult run_generation(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config,
                                bool use_cache) {
    config.validate();
    const JointVocab & vocab = model.vocab();
    SamplerState state       = make_state(initial, vocab);
    Rng rng                  = Rng(config.seed).substream("sampling");
    const auto condition     = resolve_condition(initial, vocab, config.cfg_condition);
    const int K              = use_cache ? config.cache_period : 0;
    const int T = config.strategy == Strategy::OnePerStep ? static_cast<int>(state.initial_masked) : config.steps;

    GenerationResult result;
    CacheSlots cache;
    std::size_t target = 0;
    for (int step = 0; step < T; ++step) {
        const int t_index = T - step;
        bool refresh      = true;
        if (use_cache) {
            const bool text_left  = state.sequence.count_masked(vocab, Modality::Text) > 0;
            const bool image_left = state.sequence.count_masked(vocab, Modality::Image) > 0;
            refresh = !cache.cond.valid || t_index % K == 0 || (image_left && (t_index == 1 || !text_left));
        }
        const auto candidates = masked_positions(state.sequence, vocab, !refresh);
        StepLogits sl;
        try {
            sl = step_logits(model, state.sequence, config, step, condition, use_cache ? &cache : nullptr, refresh);
        } catch (const InconsistencyError & e) {
            throw InconsistencyError("generation step " + std::to_string(step) + " of " + std::to_string(T) + ": " + e.what());
        }
        (refresh ? result.full_passes : result.partial_passes) += 1;

        const double tau = config.temperature.at(step, T);
        double conf      = 0.0;
        switch (config.strategy) {
        case Strategy::MaskGit: {
            target += unmask_quota(t_index, T, config.schedule, state.initial_masked);
            const std::size_t want = target > state.revealed ? target - state.revealed : 0;
            conf                   = apply_maskgit(state, sl.logits, candidates, want, config, tau, rng);
            break;
        }
        case Strategy::Ddpm: {
            const double t = static_cast<double>(t_index) / T;
            const double s = static_cast<double>(t_index - 1) / T;
            conf           = apply_ddpm(state, sl.logits, candidates, ddpm_reveal_probability(config.schedule, t, s), config,
                                        tau, rng);
            break;
        }
        case Strategy::OnePerStep: {
            if (!candidates.empty()) {
                const std::size_t pos      = candidates[rng.below(candidates.size())];
                const SampledToken s       = sample_token(sl.logits.row(pos), config.top_k, config.top_p, tau, rng);
                state.sequence.tokens[pos] = s.token;
                state.revealed += 1;
                conf = s.confidence;
            }
            break;
        }
        }
        result.trace.push_back(StepTrace{step, state.sequence.count_masked(vocab), conf, sl.gap, refresh});
    }
    if (state.sequence.count_masked(vocab) != 0) {
        throw Error("generation finished with masked positions left");
    }
    state.sequence.t_text  = 0.0;
    state.sequence.t_image = 0.0;
    result.sequence        = std::move(state.sequence);
    return result;
}

} // namespace

void maskgit_step(SamplerState & state, const Denoiser & model, const SamplerConfig & config, int step_index, Rng & rng) {
    const JointVocab & vocab = model.vocab();
    const auto candidates    = masked_positions(state.sequence, vocab, false);
    if (candidates.empty()) {
        throw PreconditionError("maskgit_step needs at least one masked position");
    }
    const int T       = config.steps;
    const int t_index = T - step_index;
    std::size_t target = 0;
    for (int k = T; k >= t_index; --k) {
        target += unmask_quota(k, T, config.schedule, state.initial_masked);
    }
    const std::size_t want = target > state.revealed ? target - state.revealed : 0;
    const auto condition   = resolve_condition(state.sequence, vocab, config.cfg_condition);
    const StepLogits sl    = step_logits(model, state.sequence, config, step_index, condition, nullptr, true);
    apply_maskgit(state, sl.logits, candidates, want, config, config.temperature.at(step_index, T), rng);
}

void ddpm_step(SamplerState & state, const Denoiser & model, const SamplerConfig & config, double t, double s, Rng & rng) {
    if (!(s >= 0.0 && s <= t && t <= 1.0)) {
        throw DomainError("ddpm_step needs 0 <= s <= t <= 1");
    }
    const JointVocab & vocab = model.vocab();
    const auto candidates    = masked_positions(state.sequence, vocab, false);
    const double p           = s == t ? 0.0 : ddpm_reveal_probability(config.schedule, t, s);
    const auto condition     = resolve_condition(state.sequence, vocab, config.cfg_condition);
    const StepLogits sl      = step_logits(model, state.sequence, config, 0, condition, nullptr, true);
    apply_ddpm(state, sl.logits, candidates, p, config, config.temperature.start, rng);
}

GenerationResult generate(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config) {
    return run_generation(model, initial, config, false);
}

GenerationResult generate_cached(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config) {
    if (config.cache_period < 1) {
        throw ConfigError("generate_cached needs cache_period >= 1");
    }
    if (!model.supports_image_cache()) {
        throw CapabilityError("cached generation requested on a model without image cache support");
    }
    return run_generation(model, initial, config, true);
}

std::vector<double> cfg_logit_gap_trace(const Denoiser & model, const MaskedSequence & initial, const SamplerConfig & config) {
    SamplerConfig c   = config;
    c.trace_cfg_gap   = true;
    const auto result = generate(model, initial, c);
    std::vector<double> gaps;
    gaps.reserve(result.trace.size());
    for (const auto & s : result.trace) {
        gaps.push_back(s.cfg_gap);
    }
    return gaps;
}

EditResult edit_best_of_n(const Denoiser & model, const MaskedSequence & pair, const EditOptions & options,
                          const SamplerConfig & config, Rng & rng) {
    if (options.n < 1) {
        throw ConfigError("best-of-n editing needs n >= 1");
    }
    if (!(options.noise_level > 0.0 && options.noise_level < 1.0)) {
        throw DomainError("edit noise level must lie in (0, 1)");
    }
    const JointVocab & vocab = model.vocab();
    const Rng score_stream   = rng.substream("edit-score");
    EditResult out;
    for (int i = 0; i < options.n; ++i) {
        Rng noise = rng.substream(static_cast<std::uint64_t>(i));
        TimestepPair tp{options.noise_level, options.noise_level, 0.0};
        if (options.fix_text) {
            tp.t_text = 0.0;
        }
        const MaskedSequence noisy = corrupt(pair, tp, config.schedule, vocab, noise);
        SamplerConfig c            = config;
        c.seed                     = noise.next_u64();
        MaskedSequence denoised    = noisy.count_masked(vocab) == 0 ? noisy : generate(model, noisy, c).sequence;
        denoised.t_text            = 0.0;
        denoised.t_image           = 0.0;
        const double score = joint_likelihood_score(model, denoised, options.n_mc, score_stream, ScoreMode::Joint,
                                                    config.schedule)
                                 .value;
        out.candidates.push_back(std::move(denoised));
        out.scores.push_back(score);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.scores.size(); ++i) {
        if (out.scores[i] > out.scores[best]) {
            best = i;
        }
    }
    out.best_index = best;
    out.best       = out.candidates[best];
    return out;
}

} // namespace maskfuse
