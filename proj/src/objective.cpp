#include "maskfuse/objective.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/forward.hpp"

#include <algorithm>
#include <cmath>

namespace maskfuse {

LossValue targeted_cross_entropy(const Logits & logits, std::span<const TokenId> targets, std::span<const double> row_weights,
                                 double normalizer, Logits * dlogits) {
    if (targets.size() != logits.rows() || row_weights.size() != logits.rows()) {
        throw StructuralError("loss: targets/weights do not match logit rows");
    }
    if (dlogits) {
        *dlogits = Logits(logits.rows(), logits.cols(), 0.0);
    }
    LossValue out;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0) {
            continue;
        }
        ++out.supervised;
    }
    if (out.supervised == 0 || !(normalizer > 0.0)) {
        out.degenerate = true;
        return out;
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0) {
            continue;
        }
        const auto target = static_cast<std::size_t>(targets[i]);
        if (target >= logits.cols()) {
            throw StructuralError("loss target outside the vocab");
        }
        auto row        = logits.row(i);
        const double w  = row_weights[i] / normalizer;
        out.nats += w * cross_entropy(row, target);
        if (dlogits) {
            const auto p = softmax(row);
            auto drow    = dlogits->row(i);
            for (std::size_t j = 0; j < p.size(); ++j) {
                drow[j] = w * p[j];
            }
            drow[target] -= w;
        }
    }
    return out;
}

LossValue diffusion_loss(const Logits & logits, const std::vector<TokenId> & x0, const MaskedSequence & x_t,
                         DiffusionWeights weights, LossNormalization norm, Logits * dlogits) {
    if (x0.size() != x_t.tokens.size() || logits.rows() != x0.size()) {
        throw StructuralError("diffusion_loss: shapes disagree");
    }
    // The mask id is the last column of the joint vocab.
    const TokenId mask_id = static_cast<TokenId>(logits.cols()) - 1;
    std::vector<TokenId> targets(x0.size(), -1);
    std::vector<double> row_w(x0.size(), 0.0);
    std::size_t n_masked = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        if (x_t.tokens[i] == mask_id) {
            targets[i] = x0[i];
            row_w[i]   = x_t.layout->tag(i) == Modality::Text ? weights.text : weights.image;
            ++n_masked;
        }
    }
    const double normalizer =
        norm == LossNormalization::MaskedMean ? static_cast<double>(n_masked) : static_cast<double>(x0.size());
    return targeted_cross_entropy(logits, targets, row_w, normalizer, dlogits);
}

LossValue diffusion_loss(const Logits & logits, const std::vector<TokenId> & x0, const MaskedSequence & x_t, double weight,
                         Logits * dlogits) {
    if (!std::isfinite(weight)) {
        throw DomainError("diffusion_loss weight must be finite");
    }
    return diffusion_loss(logits, x0, x_t, DiffusionWeights{weight, weight}, LossNormalization::MaskedMean, dlogits);
}

LossValue ar_loss(const Logits & next_token_logits, const std::vector<TokenId> & x, Logits * dlogits,
                  std::span<const char> supervise) {
    if (next_token_logits.rows() != x.size()) {
        throw StructuralError("ar_loss: shapes disagree");
    }
    if (!supervise.empty() && supervise.size() != x.size()) {
        throw StructuralError("ar_loss: supervision mask length");
    }
    std::vector<TokenId> targets(x.size(), -1);
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (supervise.empty() || supervise[i]) {
            targets[i] = x[i];
            ++n;
        }
    }
    std::vector<double> w(x.size(), 1.0);
    return targeted_cross_entropy(next_token_logits, targets, w, static_cast<double>(n), dlogits);
}

namespace {

double weight_at(const Schedule & schedule, double t) {
    return loss_weight(eval_schedule(schedule, t), std::nullopt);
}

} // namespace

ElboEstimate elbo_estimate(const Denoiser & model, const MaskedSequence & x0, int n_mc, const ElboOptions & options, Rng & rng) {
    if (n_mc < 1) {
        throw PreconditionError("elbo_estimate needs n_mc >= 1");
    }
    const JointVocab & vocab = model.vocab();
    const std::size_t n_scored =
        options.scored_modality ? x0.layout->count(*options.scored_modality) : x0.tokens.size();
    ElboEstimate est;
    est.n_samples     = n_mc;
    est.scored_tokens = n_scored;
    if (n_scored == 0) {
        return est;
    }
    double sum = 0.0, sum_sq = 0.0;
    for (int k = 0; k < n_mc; ++k) {
        const double u = rng.uniform();
        double t       = options.stratified ? (k + u) / n_mc : u;
        t              = std::clamp(t, 0.0, 1.0);
        const double alpha = options.schedule.alpha(t);
        double a_text      = alpha;
        double a_image     = alpha;
        if (options.scored_modality) {
            (*options.scored_modality == Modality::Text ? a_image : a_text) = 1.0;
        }
        MaskedSequence x_t = corrupt_with_alpha(x0, a_text, a_image, vocab, rng);
        x_t.t_text         = a_text == 1.0 ? 0.0 : t;
        x_t.t_image        = a_image == 1.0 ? 0.0 : t;
        double value       = 0.0;
        if (x_t.count_masked(vocab) > 0) {
            Logits logits = model.predict(x_t);
            if (options.scored_modality && options.cfg_weight != 0.0) {
                const Modality cond  = *options.scored_modality == Modality::Text ? Modality::Image : Modality::Text;
                const Logits uncond  = model.predict(mask_modality(x_t, cond, vocab));
                logits               = cfg_blend(logits, uncond, options.cfg_weight, options.cfg_sign);
            }
            const double w = weight_at(options.schedule, t);
            double ce      = 0.0;
            for (std::size_t i = 0; i < x0.tokens.size(); ++i) {
                if (vocab.is_mask(x_t.tokens[i])) {
                    ce += cross_entropy(logits.row(i), static_cast<std::size_t>(x0.tokens[i]));
                }
            }
            value = w * ce / static_cast<double>(n_scored);
        }
        sum += value;
        sum_sq += value * value;
    }
    const double mean = sum / n_mc;
    const double var  = n_mc > 1 ? std::max(0.0, (sum_sq - n_mc * mean * mean) / (n_mc - 1)) : 0.0;
    est.nats_per_token = mean;
    est.std_error      = std::sqrt(var / n_mc);
    return est;
}

LikelihoodScore joint_likelihood_score(const Denoiser & model, const MaskedSequence & x0, int n_mc, Rng rng, ScoreMode mode,
                                       const Schedule & schedule, double cfg_weight) {
    ElboOptions o;
    o.schedule = schedule;
    if (mode == ScoreMode::ImageGivenText) {
        o.scored_modality = Modality::Image;
        o.cfg_weight      = cfg_weight;
    } else if (mode == ScoreMode::TextGivenImage) {
        o.scored_modality = Modality::Text;
        o.cfg_weight      = cfg_weight;
    }
    const ElboEstimate e = elbo_estimate(model, x0, n_mc, o, rng);
    const auto n         = static_cast<double>(e.scored_tokens);
    return LikelihoodScore{-e.nats_per_token * n, e.std_error * n};
}

double ar_sequence_nll(const Transformer & model, const MaskedSequence & x) {
    const Logits logits = ar_predict(model, x);
    double nll          = 0.0;
    for (std::size_t i = 0; i < x.tokens.size(); ++i) {
        nll += cross_entropy(logits.row(i), static_cast<std::size_t>(x.tokens[i]));
    }
    return nll;
}

double ar_conditional_nll(const Transformer & model, const MaskedSequence & x, Modality target) {
    const ModalityLayout & from = *x.layout;
    // The conditioning modality has to precede the target.
    const bool need_image_first = target == Modality::Text;
    MaskedSequence ordered      = x;
    if (from.image_first() != need_image_first) {
        ordered.layout = make_layout(from.flipped());
        ordered.tokens = relayout_tokens(x.tokens, from, *ordered.layout);
    }
    const Logits logits = ar_predict(model, ordered);
    double nll          = 0.0;
    for (std::size_t p : ordered.layout->positions(target)) {
        nll += cross_entropy(logits.row(p), static_cast<std::size_t>(ordered.tokens[p]));
    }
    return nll;
}

} // namespace maskfuse
