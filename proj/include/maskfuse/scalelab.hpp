#pragma once

#include "maskfuse/data.hpp"
#include "maskfuse/train.hpp"
#include "maskfuse/transformer.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace maskfuse {

using Count = std::uint64_t;

// C = 6 N D.
Count flop_budget(Count n_params, Count n_tokens);
// floor(C / 6N).
Count tokens_for_budget(Count flops, Count n_params);

// Non-embedding parameters: everything except the token and modality
// embedding tables. The output head (final norm and projection) is included.
Count count_params(const ModelSpec & spec);
// The same count by summing the enumerated tensors.
Count count_params_enumerated(const ModelSpec & spec);

struct ScalingPoint {
    Count budget     = 0; // requested C
    Count flops      = 0; // 6 N D for the D actually assigned
    Count params     = 0;
    Count tokens     = 0;
    double final_loss = 0.0;
    int steps         = 0; // optimiser steps run (0 for synthetic surfaces)
    std::string label;
};

// Trains (or evaluates) one grid cell for `tokens` tokens and returns its final loss.
using CellFn = std::function<double(std::size_t cell, Count params, Count tokens)>;

// One ScalingPoint per (budget, cell). Cells whose D falls below
// `min_tokens` are skipped; `skipped` collects a message for each.
std::vector<ScalingPoint> isoflop_sweep(const std::vector<Count> & budgets, const std::vector<Count> & cell_params,
                                        const CellFn & run_cell, Count min_tokens = 1,
                                        std::vector<std::string> * skipped = nullptr);

// Real sweep: each model spec trains from the same seed on the same data
// order for D = C / 6N tokens; loss is the smoothed final training loss.
std::vector<ScalingPoint> isoflop_sweep(const std::vector<Count> & budgets, const std::vector<ModelSpec> & grid,
                                        const Dataset & data, const TrainConfig & train, std::uint64_t seed,
                                        std::vector<std::string> * skipped = nullptr);

struct IsoflopFit {
    double n_opt        = 0.0;
    double loss_at_opt  = 0.0;
    double curvature    = 0.0; // quadratic coefficient in ln N
    bool concave        = false; // fit opens downward: no minimum
    bool vertex_outside = false; // minimum lies outside the sampled N range
    bool ok() const noexcept { return !concave && !vertex_outside; }
};

// Least-squares parabola of loss against ln N. Needs >= 3 points with distinct N.
IsoflopFit fit_isoflop_minimum(const std::vector<ScalingPoint> & points);

struct PowerLawFit {
    double coefficient = 0.0; // a in y = a x^b
    double exponent    = 0.0; // b
    double residual    = 0.0; // RMS residual in ln y

    double operator()(double x) const;
};

// Linear regression of ln y on ln x. Throws PreconditionError with fewer than
// three points and DomainError on nonpositive values.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>> & xy);

// Ratio C_b / C_a at which two loss-vs-compute power laws reach `loss`.
double compute_offset(const PowerLawFit & a, const PowerLawFit & b, double loss);

// L(N, D) = A + B N^-alpha + E D^-beta.
struct PlantedSurface {
    double A = 1.69, B = 406.4, alpha = 0.34, E = 410.7, beta = 0.28;

    double loss(double n, double d) const;
    // Compute-optimal N(C) exponent beta / (alpha + beta).
    double n_opt_exponent() const noexcept { return beta / (alpha + beta); }
    double n_opt(double flops) const;
};

struct PipelineResult {
    std::vector<ScalingPoint> points;
    std::vector<std::pair<double, double>> minima; // (C, N_opt)
    std::vector<IsoflopFit> fits;
    PowerLawFit law;
};

// Groups points by budget, fits each parabola and regresses N_opt on C.
// Budgets whose fit fails are left out of the power law.
PipelineResult fit_pipeline(const std::vector<ScalingPoint> & points);

// Log-spaced parameter counts spanning [lo, hi].
std::vector<Count> log_spaced(Count lo, Count hi, int n);

void write_points_csv(const std::vector<ScalingPoint> & points, std::uint64_t seed, std::ostream & out);

} // namespace maskfuse
