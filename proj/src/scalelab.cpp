#include "maskfuse/scalelab.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

namespace maskfuse {

Count flop_budget(Count n_params, Count n_tokens) {
    if (n_params == 0 || n_tokens == 0) {
        throw DomainError("flop_budget needs N > 0 and D > 0");
    }
    return 6 * n_params * n_tokens;
}

Count tokens_for_budget(Count flops, Count n_params) {
    if (n_params == 0) {
        throw DomainError("tokens_for_budget needs N > 0");
    }
    return flops / (6 * n_params);
}

Count count_params(const ModelSpec & spec) {
    spec.validate();
    const Count d = static_cast<Count>(spec.d_model);
    const Count f = static_cast<Count>(spec.ffn_hidden());
    const Count v = static_cast<Count>(spec.vocab.total_size());
    Count block   = d + 4 * d * d + d + d * f + f + f * d + d;
    if (spec.qk_norm) {
        block += 1;
    }
    if (spec.sandwich_norm) {
        block += d;
    }
    const Count head = d + d * v + v;
    return static_cast<Count>(spec.n_layers) * block + head;
}

Count count_params_enumerated(const ModelSpec & spec) {
    Count n = 0;
    for (const auto & t : enumerate_tensors(spec)) {
        if (!t.embedding) {
            n += t.size();
        }
    }
    return n;
}

std::vector<ScalingPoint> isoflop_sweep(const std::vector<Count> & budgets, const std::vector<Count> & cell_params,
                                        const CellFn & run_cell, Count min_tokens, std::vector<std::string> * skipped) {
    std::vector<ScalingPoint> out;
    for (Count c : budgets) {
        for (std::size_t i = 0; i < cell_params.size(); ++i) {
            const Count n = cell_params[i];
            const Count d = tokens_for_budget(c, n);
            if (d < std::max<Count>(1, min_tokens)) {
                if (skipped) {
                    skipped->push_back("budget " + std::to_string(c) + " with N=" + std::to_string(n) + " gives D=" +
                                       std::to_string(d) + " tokens, below one batch");
                }
                continue;
            }
            ScalingPoint p;
            p.budget     = c;
            p.params     = n;
            p.tokens     = d;
            p.flops      = flop_budget(n, d);
            p.final_loss = run_cell(i, n, d);
            out.push_back(p);
        }
    }
    return out;
}

std::vector<ScalingPoint> isoflop_sweep(const std::vector<Count> & budgets, const std::vector<ModelSpec> & grid,
                                        const Dataset & data, const TrainConfig & train, std::uint64_t seed,
                                        std::vector<std::string> * skipped) {
    if (data.size() == 0) {
        throw PreconditionError("isoflop sweep needs a nonempty dataset");
    }
    std::vector<Count> params;
    params.reserve(grid.size());
    for (const auto & s : grid) {
        params.push_back(count_params(s));
    }
    const Count tokens_per_step = static_cast<Count>(train.batch_size) * data.layout->length();
    std::vector<int> steps_run;
    auto run = [&](std::size_t cell, Count, Count tokens) {
        TrainConfig cfg = train;
        cfg.steps       = static_cast<int>(tokens / tokens_per_step);
        cfg.warmup_steps = std::min(cfg.warmup_steps, cfg.steps / 10);
        Transformer model(grid[cell], Rng(seed).substream("init").next_u64());
        const TrainResult r = train_model(model, data, cfg, Rng(seed).substream("train"));
        steps_run.push_back(cfg.steps);
        return r.smoothed_final_loss();
    };
    auto points = isoflop_sweep(budgets, params, run, tokens_per_step, skipped);
    for (std::size_t i = 0; i < points.size(); ++i) {
        points[i].steps = steps_run[i];
    }
    return points;
}

IsoflopFit fit_isoflop_minimum(const std::vector<ScalingPoint> & points) {
    if (points.size() < 3) {
        throw PreconditionError("parabola fit needs at least three points");
    }
    std::vector<double> x, y;
    for (const auto & p : points) {
        if (p.params == 0) {
            throw DomainError("parabola fit needs N > 0");
        }
        x.push_back(std::log(static_cast<double>(p.params)));
        y.push_back(p.final_loss);
    }
    const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) {
        throw PreconditionError("parabola fit needs distinct N values");
    }
    // Normalise x to [-1, 1] for a well-conditioned 3x3 system.
    const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
    double s[5] = {0, 0, 0, 0, 0}, r[3] = {0, 0, 0};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = (x[i] - mid) / half;
        double pw      = 1.0;
        for (int k = 0; k < 5; ++k) {
            s[k] += pw;
            if (k < 3) {
                r[k] += pw * y[i];
            }
            pw *= u;
        }
    }
    // [s0 s1 s2; s1 s2 s3; s2 s3 s4] [c0 c1 c2]^T = r, by Cramer's rule.
    auto det3 = [](double a, double b, double c, double d, double e, double f, double g, double h, double i) {
        return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    };
    const double det = det3(s[0], s[1], s[2], s[1], s[2], s[3], s[2], s[3], s[4]);
    if (std::abs(det) < 1e-300) {
        throw PreconditionError("parabola fit is singular");
    }
    const double c0 = det3(r[0], s[1], s[2], r[1], s[2], s[3], r[2], s[3], s[4]) / det;
    const double c1 = det3(s[0], r[0], s[2], s[1], r[1], s[3], s[2], r[2], s[4]) / det;
    const double c2 = det3(s[0], s[1], r[0], s[1], s[2], r[1], s[2], s[3], r[2]) / det;

    IsoflopFit fit;
    fit.curvature = c2 / (half * half);
    if (!(c2 > 0.0)) {
        fit.concave = true;
        const auto best = std::min_element(y.begin(), y.end()) - y.begin();
        fit.n_opt       = std::exp(x[static_cast<std::size_t>(best)]);
        fit.loss_at_opt = y[static_cast<std::size_t>(best)];
        return fit;
    }
    const double u_star = -c1 / (2.0 * c2);
    fit.n_opt           = std::exp(mid + half * u_star);
    fit.loss_at_opt     = c0 + c1 * u_star + c2 * u_star * u_star;
    fit.vertex_outside  = u_star < -1.0 || u_star > 1.0;
    return fit;
}

double PowerLawFit::operator()(double x) const { return coefficient * std::pow(x, exponent); }

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>> & xy) {
    if (xy.size() < 3) {
        throw PreconditionError("power-law fit needs at least three points");
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::vector<double> lx, ly;
    for (const auto & [x, y] : xy) {
        if (!(x > 0.0) || !(y > 0.0)) {
            throw DomainError("power-law fit needs positive values");
        }
        lx.push_back(std::log(x));
        ly.push_back(std::log(y));
    }
    const double n = static_cast<double>(xy.size());
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sx += lx[i];
        sy += ly[i];
    }
    const double mx = sx / n, my = sy / n;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (!(sxx > 0.0)) {
        throw PreconditionError("power-law fit needs distinct x values");
    }
    PowerLawFit fit;
    fit.exponent    = sxy / sxx;
    const double ln_a = my - fit.exponent * mx;
    fit.coefficient = std::exp(ln_a);
    double rss      = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        const double e = ly[i] - (ln_a + fit.exponent * lx[i]);
        rss += e * e;
    }
    fit.residual = std::sqrt(rss / n);
    return fit;
}

double compute_offset(const PowerLawFit & a, const PowerLawFit & b, double loss) {
    if (!(loss > 0.0) || a.exponent == 0.0 || b.exponent == 0.0) {
        throw DomainError("compute_offset needs a positive loss and nonzero exponents");
    }
    const double ca = std::pow(loss / a.coefficient, 1.0 / a.exponent);
    const double cb = std::pow(loss / b.coefficient, 1.0 / b.exponent);
    return cb / ca;
}

double PlantedSurface::loss(double n, double d) const {
    if (!(n > 0.0) || !(d > 0.0)) {
        throw DomainError("planted surface needs N, D > 0");
    }
    return A + B * std::pow(n, -alpha) + E * std::pow(d, -beta);
}

double PlantedSurface::n_opt(double flops) const {
    // d/dN [B N^-a + E (C/6N)^-b] = 0.
    const double k = (alpha * B) / (beta * E) * std::pow(flops / 6.0, beta);
    return std::pow(k, 1.0 / (alpha + beta));
}

PipelineResult fit_pipeline(const std::vector<ScalingPoint> & points) {
    PipelineResult out;
    out.points = points;
    std::map<Count, std::vector<ScalingPoint>> by_budget;
    for (const auto & p : points) {
        by_budget[p.budget].push_back(p);
    }
    for (const auto & [c, pts] : by_budget) {
        if (pts.size() < 3) {
            continue;
        }
        const IsoflopFit fit = fit_isoflop_minimum(pts);
        out.fits.push_back(fit);
        if (fit.ok()) {
            out.minima.emplace_back(static_cast<double>(c), fit.n_opt);
        }
    }
    out.law = fit_power_law(out.minima);
    return out;
}

std::vector<Count> log_spaced(Count lo, Count hi, int n) {
    if (lo == 0 || hi < lo || n < 1) {
        throw DomainError("log_spaced needs 0 < lo <= hi and n >= 1");
    }
    std::vector<Count> out;
    const double a = std::log(static_cast<double>(lo)), b = std::log(static_cast<double>(hi));
    for (int i = 0; i < n; ++i) {
        const double f = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        out.push_back(static_cast<Count>(std::round(std::exp(a + f * (b - a)))));
    }
    return out;
}

void write_points_csv(const std::vector<ScalingPoint> & points, std::uint64_t seed, std::ostream & out) {
    out << "budget,flops,N,D,loss,steps,seed\n";
    for (const auto & p : points) {
        out << p.budget << ',' << p.flops << ',' << p.params << ',' << p.tokens << ',' << p.final_loss << ',' << p.steps
            << ',' << seed << '\n';
    }
}

} // namespace maskfuse
