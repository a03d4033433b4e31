#pragma once

#include "maskfuse/data.hpp"
#include "maskfuse/forward.hpp"
#include "maskfuse/objective.hpp"
#include "maskfuse/transformer.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace maskfuse {

enum class TrainObjective {
    Diffusion,
    Autoregressive,
    // Diffusion loss with left-shifted targets, for models initialised from an AR checkpoint.
    ShiftedDiffusion,
};

struct TrainConfig {
    TrainObjective objective = TrainObjective::Diffusion;
    int steps                = 1000;
    std::size_t batch_size   = 32;
    double lr                = 3e-4;
    int warmup_steps         = 100;
    double weight_decay      = 0.01;
    double beta1             = 0.9;
    double beta2             = 0.999;
    double adam_eps          = 1e-8;
    double grad_clip         = 1.0; // global norm; <= 0 disables

    Schedule schedule;
    std::optional<double> weight_clamp = kDefaultWeightClamp;
    LossNormalization normalization    = LossNormalization::MaskedMean;
    double p_uncond         = kDefaultUncondProb;
    bool modality_offset    = true;
    OffsetConfig offset;
    double flip_modality_prob = 0.0;

    void validate() const;
};

// Linear warmup to lr, then cosine decay to zero at `steps`.
double learning_rate_at(const TrainConfig & config, int step);

class AdamW {
public:
    AdamW(std::size_t n_params, const TrainConfig & config) : m_(n_params, 0.0), v_(n_params, 0.0), config_(config) {}

    // Applies one update; decay only touches tensors flagged for it.
    void step(std::span<double> params, std::span<const double> grad, const std::vector<TensorInfo> & tensors, double lr);

private:
    std::vector<double> m_;
    std::vector<double> v_;
    TrainConfig config_;
    int t_ = 0;
};

// Loss and gradient of one training example under the configured objective.
// Draws timesteps, corruption and dropout from `rng`. The gradient is added,
// scaled by `grad_scale`, into `grad`.
double example_loss_and_grad(const Transformer & model, const MaskedSequence & x0, const TrainConfig & config, Rng & rng,
                             std::span<double> grad, double grad_scale);

struct TrainResult {
    std::vector<double> loss_curve; // mean batch loss per step
    std::size_t tokens_seen = 0;

    // Mean of the last 5% of steps (at least one).
    double smoothed_final_loss() const;
};

using StepCallback = std::function<void(int step, double loss, double lr)>;

TrainResult train_model(Transformer & model, const Dataset & data, const TrainConfig & config, Rng rng,
                        const StepCallback & on_step = {});

} // namespace maskfuse
