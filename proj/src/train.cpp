#include "maskfuse/train.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace maskfuse {

void TrainConfig::validate() const {
    if (steps < 0 || batch_size < 1) {
        throw ConfigError("training needs steps >= 0 and batch_size >= 1");
    }
    if (!(lr > 0.0) || warmup_steps < 0) {
        throw ConfigError("training needs lr > 0 and warmup_steps >= 0");
    }
    if (!(p_uncond >= 0.0 && p_uncond <= 1.0) || !(flip_modality_prob >= 0.0 && flip_modality_prob <= 1.0)) {
        throw ConfigError("probabilities must lie in [0, 1]");
    }
}

double learning_rate_at(const TrainConfig & config, int step) {
    if (config.warmup_steps > 0 && step < config.warmup_steps) {
        return config.lr * static_cast<double>(step + 1) / config.warmup_steps;
    }
    const int decay_steps = std::max(1, config.steps - config.warmup_steps);
    const double progress = std::clamp(static_cast<double>(step - config.warmup_steps) / decay_steps, 0.0, 1.0);
    return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(std::span<double> params, std::span<const double> grad, const std::vector<TensorInfo> & tensors, double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    for (const auto & t : tensors) {
        const double decay = t.decay ? config_.weight_decay : 0.0;
        for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
            const double mh = m_[i] / c1;
            const double vh = v_[i] / c2;
            params[i] -= lr * (mh / (std::sqrt(vh) + config_.adam_eps) + decay * params[i]);
        }
    }
}

namespace {

double diffusion_example(const Transformer & model, const MaskedSequence & x0, const TrainConfig & config, Rng & rng,
                         std::span<double> grad, double grad_scale, bool shifted) {
    const JointVocab & vocab = model.vocab();
    TimestepPair pair;
    if (config.modality_offset) {
        pair = sample_timestep_pair(config.offset, rng);
    } else {
        pair.t_text  = rng.uniform();
        pair.t_image = pair.t_text;
    }
    MaskedSequence x_t = corrupt(x0, pair, config.schedule, vocab, rng);
    x_t                = cfg_dropout(x_t, config.p_uncond, vocab, rng);

    const DiffusionWeights w{loss_weight(eval_schedule(config.schedule, x_t.t_text), config.weight_clamp.value_or(1e300)),
                             loss_weight(eval_schedule(config.schedule, x_t.t_image), config.weight_clamp.value_or(1e300))};

    ForwardTape tape;
    Logits raw = model.forward(x_t.tokens, *x_t.layout, &tape);
    Logits dlogits;
    LossValue loss;
    if (!shifted) {
        if (model.spec().suppress_invalid) {
            suppress_invalid(raw, *x_t.layout, vocab);
        }
        loss = diffusion_loss(raw, x0.tokens, x_t, w, config.normalization, &dlogits);
    } else {
        const auto targets = shift_targets_for_finetune(x0.tokens, x_t.tokens, vocab);
        std::vector<double> row_w(targets.size(), 0.0);
        std::size_t n_masked = 0;
        for (std::size_t i = 0; i + 1 < targets.size(); ++i) {
            if (targets[i] < 0) {
                continue;
            }
            const Modality m = x_t.layout->tag(i + 1);
            row_w[i]         = m == Modality::Text ? w.text : w.image;
            ++n_masked;
            if (model.spec().suppress_invalid) {
                auto row = raw.row(i);
                for (TokenId v = 0; v < static_cast<TokenId>(row.size()); ++v) {
                    if (v < vocab.range_begin(m) || v >= vocab.range_end(m)) {
                        row[static_cast<std::size_t>(v)] = kSuppressedLogit;
                    }
                }
            }
        }
        const double norm = config.normalization == LossNormalization::MaskedMean ? static_cast<double>(n_masked)
                                                                                  : static_cast<double>(targets.size());
        loss = targeted_cross_entropy(raw, targets, row_w, norm, &dlogits);
    }
    if (loss.degenerate) {
        return 0.0;
    }
    for (double & g : dlogits.values()) {
        g *= grad_scale;
    }
    model.backward(tape, dlogits, grad);
    return loss.nats;
}

double ar_example(const Transformer & model, const MaskedSequence & x0, const TrainConfig & config, Rng & rng,
                  std::span<double> grad, double grad_scale) {
    const JointVocab & vocab = model.vocab();
    std::vector<TokenId> input = ar_shift_input(x0.tokens, vocab);
    std::vector<char> supervise(x0.tokens.size(), 1);
    // Guidance dropout for AR: hide the first block of the sequence and train
    // the second block unconditionally.
    if (rng.uniform() < config.p_uncond) {
        const Modality first = x0.layout->tag(0);
        for (std::size_t p : x0.layout->positions(first)) {
            supervise[p] = 0;
            if (p + 1 < input.size()) {
                input[p + 1] = vocab.mask_id();
            }
        }
    }
    ForwardTape tape;
    Logits raw = model.forward(input, *x0.layout, &tape);
    if (model.spec().suppress_invalid) {
        suppress_invalid(raw, *x0.layout, vocab);
    }
    Logits dlogits;
    const LossValue loss = ar_loss(raw, x0.tokens, &dlogits, supervise);
    if (loss.degenerate) {
        return 0.0;
    }
    for (double & g : dlogits.values()) {
        g *= grad_scale;
    }
    model.backward(tape, dlogits, grad);
    return loss.nats;
}

} // namespace

double example_loss_and_grad(const Transformer & model, const MaskedSequence & x0, const TrainConfig & config, Rng & rng,
                             std::span<double> grad, double grad_scale) {
    switch (config.objective) {
    case TrainObjective::Diffusion:
        return diffusion_example(model, x0, config, rng, grad, grad_scale, false);
    case TrainObjective::ShiftedDiffusion:
        return diffusion_example(model, x0, config, rng, grad, grad_scale, true);
    case TrainObjective::Autoregressive:
        if (model.spec().attention != Attention::Causal) {
            throw ConfigError("autoregressive training needs a causal model");
        }
        return ar_example(model, x0, config, rng, grad, grad_scale);
    }
    return 0.0;
}

double TrainResult::smoothed_final_loss() const {
    if (loss_curve.empty()) {
        return 0.0;
    }
    const std::size_t n = std::max<std::size_t>(1, loss_curve.size() / 20);
    double s            = 0.0;
    for (std::size_t i = loss_curve.size() - n; i < loss_curve.size(); ++i) {
        s += loss_curve[i];
    }
    return s / static_cast<double>(n);
}

TrainResult train_model(Transformer & model, const Dataset & data, const TrainConfig & config, Rng rng,
                        const StepCallback & on_step) {
    config.validate();
    if (!data.layout->same_shape(*model.spec().layout) || !(data.vocab == model.vocab())) {
        throw ConfigError("dataset does not match the model spec");
    }
    BatchIterator batches(data, config.batch_size, config.flip_modality_prob, rng.substream("data"));
    Rng corruption = rng.substream("corruption");
    AdamW opt(model.parameter_count(), config);
    std::vector<double> grad(model.parameter_count());
    TrainResult result;
    result.loss_curve.reserve(static_cast<std::size_t>(config.steps));
    const double scale = 1.0 / static_cast<double>(config.batch_size);
    for (int step = 0; step < config.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (const Sample & s : batches.next_batch()) {
            loss += example_loss_and_grad(model, s.sequence, config, corruption, grad, scale);
            result.tokens_seen += s.sequence.tokens.size();
        }
        loss *= scale;
        if (config.grad_clip > 0.0) {
            double norm = 0.0;
            for (double g : grad) {
                norm += g * g;
            }
            norm = std::sqrt(norm);
            if (norm > config.grad_clip) {
                const double c = config.grad_clip / norm;
                for (double & g : grad) {
                    g *= c;
                }
            }
        }
        const double lr = learning_rate_at(config, step);
        opt.step(model.parameters(), grad, model.tensors(), lr);
        result.loss_curve.push_back(loss);
        if (on_step) {
            on_step(step, loss, lr);
        }
    }
    return result;
}

} // namespace maskfuse
