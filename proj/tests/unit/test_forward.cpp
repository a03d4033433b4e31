#include "maskfuse/errors.hpp"
#include "maskfuse/forward.hpp"

#include <doctest.h>

#include <cmath>

using namespace maskfuse;

TEST_CASE("transition matrix structure") {
    const auto v = build_vocab(1, 1);
    const auto q = transition_matrix(0.6, v);
    const double expect[3][3] = {{0.6, 0, 0.4}, {0, 0.6, 0.4}, {0, 0, 1}};
    for (int i = 0; i < 3; ++i) {
        double row = 0.0;
        for (int j = 0; j < 3; ++j) {
            CHECK(q.at(i, j) == doctest::Approx(expect[i][j]));
            row += q.at(i, j);
        }
        CHECK(std::abs(row - 1.0) < 1e-12);
    }
    const auto id = transition_matrix(1.0, v);
    const auto ab = transition_matrix(0.0, v);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            CHECK(id.at(i, j) == (i == j ? 1.0 : 0.0));
            CHECK(ab.at(i, j) == (j == 2 ? 1.0 : 0.0));
        }
    }
    CHECK_THROWS_AS(transition_matrix(1.5, v), DomainError);
}

TEST_CASE("composition closes over the absorbing family") {
    const auto v = build_vocab(2, 3);
    const std::vector<double> a{0.9, 0.8};
    CHECK(compose_transitions(a, v).max_abs_diff(transition_matrix(0.72, v)) < 1e-12);
    const std::vector<double> ones(5, 1.0);
    CHECK(compose_transitions(ones, v).max_abs_diff(transition_matrix(1.0, v)) < 1e-12);
    const std::vector<double> absorb{0.5, 0.0};
    CHECK(compose_transitions(absorb, v).max_abs_diff(transition_matrix(0.0, v)) < 1e-12);
    CHECK_THROWS(compose_transitions(std::vector<double>{}, v));

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> alphas(1 + rng.below(8));
        double prod = 1.0;
        for (auto & x : alphas) {
            x = rng.uniform();
            prod *= x;
        }
        CHECK(compose_transitions(alphas, v).max_abs_diff(transition_matrix(prod, v)) < 1e-12);
    }
}

TEST_CASE("corruption") {
    const auto v      = build_vocab(4, 4);
    const auto layout = make_layout(ModalityLayout::blocks(2, 2, 4));
    const auto x0     = clean_sequence({4, 5, 6, 7, 0, 1, 2, 3}, layout);
    Rng rng(1);
    const auto lin = Schedule::linear();

    CHECK(corrupt(x0, {0.0, 0.0, 0.0}, lin, v, rng).tokens == x0.tokens);
    const auto all = corrupt(x0, {1.0, 1.0, 0.0}, lin, v, rng);
    CHECK(all.count_masked(v) == 8);
    CHECK(all.t_text == 1.0);

    auto bad      = x0;
    bad.tokens[0] = v.mask_id();
    CHECK_THROWS_AS(corrupt(bad, {0.5, 0.5, 0.0}, lin, v, rng), PreconditionError);

    // Only image masked when t_text = 0.
    const auto img = corrupt(x0, {0.0, 1.0, 0.0}, lin, v, rng);
    CHECK(img.count_masked(v, Modality::Image) == 4);
    CHECK(img.count_masked(v, Modality::Text) == 0);

    // Absorbing: visible tokens never change identity, and all outputs validate.
    for (int i = 0; i < 200; ++i) {
        const double t = rng.uniform();
        const auto x   = corrupt(x0, {t, rng.uniform() * t, 0.0}, lin, v, rng);
        CHECK(validate_sequence(x, v).ok);
        for (std::size_t p = 0; p < x.length(); ++p) {
            CHECK((x.tokens[p] == x0.tokens[p] || v.is_mask(x.tokens[p])));
        }
        const auto y = corrupt_with_alpha(x, 0.5, 0.5, v, rng);
        for (std::size_t p = 0; p < x.length(); ++p) {
            if (v.is_mask(x.tokens[p])) {
                CHECK(v.is_mask(y.tokens[p]));
            }
        }
    }
}

TEST_CASE("forward marginal fraction") {
    const auto v = build_vocab(4, 4);
    const std::size_t n = 100000;
    const auto layout = make_layout(ModalityLayout::blocks(0, 0, static_cast<int>(n)));
    const auto x0     = clean_sequence(std::vector<TokenId>(n, 1), layout);
    Rng rng(2024);
    const auto x       = corrupt(x0, {0.3, 0.3, 0.0}, Schedule::linear(), v, rng);
    const double frac  = static_cast<double>(x.count_masked(v)) / n;
    CHECK(std::abs(frac - 0.3) < 0.0045);
}

TEST_CASE("chained corruption matches the one-step marginal") {
    // Chi-square goodness of fit, 1 dof, p > 0.001 <=> statistic < 10.83.
    const auto v      = build_vocab(1, 1);
    const auto layout = make_layout(ModalityLayout::blocks(0, 0, 1));
    const std::vector<double> alphas{0.8, 0.7, 0.9};
    const double p_keep = 0.8 * 0.7 * 0.9;
    const int trials    = 100000;
    Rng rng(77);
    int kept_chain = 0, kept_direct = 0;
    for (int i = 0; i < trials; ++i) {
        MaskedSequence x = clean_sequence({0}, layout);
        for (double a : alphas) {
            x = corrupt_with_alpha(x, a, a, v, rng);
        }
        kept_chain += x.tokens[0] == 0;
        const auto y = corrupt_with_alpha(clean_sequence({0}, layout), p_keep, p_keep, v, rng);
        kept_direct += y.tokens[0] == 0;
    }
    auto chi2 = [&](int kept) {
        const double e1 = trials * p_keep, e0 = trials * (1 - p_keep);
        return (kept - e1) * (kept - e1) / e1 + (trials - kept - e0) * (trials - kept - e0) / e0;
    };
    CHECK(chi2(kept_chain) < 10.83);
    CHECK(chi2(kept_direct) < 10.83);
}

TEST_CASE("timestep pairs") {
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
        const auto p = sample_timestep_pair(10.0, 100, 100, rng);
        CHECK(p.delta == doctest::Approx(0.1));
        CHECK(p.t_image <= p.t_text);
        CHECK(p.t_image >= std::max(0.0, p.t_text - p.delta) - 1e-15);
    }
    for (int i = 0; i < 1000; ++i) {
        const auto p = sample_timestep_pair(10.0, 50, 1000, rng);
        CHECK(p.delta >= 0.01);
        CHECK(p.delta <= 0.2);
        CHECK(p.t_image >= 0.0);
    }
    const auto same = timestep_pair_from(0.4, 0.0, 0.7);
    CHECK(same.t_image == 0.4);
    for (double u : {0.0, 0.5, 0.999}) {
        const auto c = timestep_pair_from(0.05, 0.1, u);
        CHECK(c.t_image >= 0.0);
        CHECK(c.t_image <= 0.05);
    }
    CHECK_THROWS_AS(sample_timestep_pair(10.0, 0, 10, rng), ConfigError);
    CHECK_THROWS_AS(sample_timestep_pair(10.0, 20, 10, rng), ConfigError);
    CHECK_THROWS_AS(sample_timestep_pair(0.0, 10, 10, rng), ConfigError);
}

TEST_CASE("guidance dropout") {
    const auto v      = build_vocab(4, 4);
    const auto layout = make_layout(ModalityLayout::blocks(2, 2, 4));
    const auto x0     = clean_sequence({4, 5, 6, 7, 0, 1, 2, 3}, layout);
    Rng rng(4);
    CHECK(kDefaultUncondProb == 0.1);
    for (int i = 0; i < 50; ++i) {
        CHECK(cfg_dropout(x0, 0.0, v, rng).tokens == x0.tokens);
    }
    int image = 0, text = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto x = cfg_dropout(x0, 1.0, v, rng);
        CHECK(validate_sequence(x, v).ok);
        const bool img = x.count_masked(v, Modality::Image) == 4 && x.count_masked(v, Modality::Text) == 0;
        const bool txt = x.count_masked(v, Modality::Text) == 4 && x.count_masked(v, Modality::Image) == 0;
        CHECK((img || txt));
        image += img;
        text += txt;
    }
    CHECK(std::abs(image - 1000) < 150);

    const auto m = mask_modality(x0, Modality::Image, v);
    CHECK(m.t_image == 1.0);
    CHECK(m.count_masked(v) == 4);
}
