#include "helpers.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/logits.hpp"

#include <doctest.h>

#include <cmath>

using namespace maskfuse;
using testing::AbToy;

TEST_CASE("oracle posterior on {AB, BA}") {
    AbToy toy;
    const TokenId m = toy.vocab.mask_id();

    const auto half = oracle_posterior(*toy.dist, MaskedSequence{{0, m}, toy.layout, 0.5, 0}, toy.vocab);
    const auto p1   = softmax(half.row(1));
    CHECK(p1[1] == doctest::Approx(1.0));
    CHECK(p1[0] == 0.0);

    const auto none = oracle_posterior(*toy.dist, MaskedSequence{{m, m}, toy.layout, 1, 0}, toy.vocab);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto p = softmax(none.row(i));
        CHECK(p[0] == doctest::Approx(0.5));
        CHECK(p[1] == doctest::Approx(0.5));
        CHECK(p[2] == 0.0);
        CHECK(p[3] == 0.0);
        double s = 0.0;
        for (double x : p) {
            s += x;
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
    }

    const auto full = oracle_posterior(*toy.dist, MaskedSequence{{1, 0}, toy.layout, 0, 0}, toy.vocab);
    CHECK(softmax(full.row(0))[1] == doctest::Approx(1.0));
    CHECK(softmax(full.row(1))[0] == doctest::Approx(1.0));

    CHECK_THROWS_AS(oracle_posterior(*toy.dist, MaskedSequence{{0, 0}, toy.layout, 0, 0}, toy.vocab), InconsistencyError);

    OracleDenoiser lenient(toy.dist, toy.vocab, OracleDenoiser::OnInconsistent::Uniform);
    const auto u = softmax(lenient.predict(MaskedSequence{{0, 0}, toy.layout, 0, 0}).row(0));
    CHECK(u[0] == doctest::Approx(0.5));
}

TEST_CASE("oracle marginals and deterministic support") {
    const auto v      = build_vocab(3, 2);
    const auto layout = make_layout(ModalityLayout::blocks(1, 1, 1));
    // P(image=3, text=0) = 0.25, P(image=4, text=0) = 0.25, P(image=4, text=2) = 0.5
    const auto dist = std::make_shared<ToyJointDistribution>(layout, std::vector<std::vector<TokenId>>{{3, 0}, {4, 0}, {4, 2}},
                                                             std::vector<double>{0.25, 0.25, 0.5}, v);
    const TokenId m = v.mask_id();
    OracleDenoiser oracle(dist, v);
    const auto out = oracle.predict(MaskedSequence{{m, m}, layout, 1, 1});
    const auto pi  = softmax(out.row(0));
    const auto pt  = softmax(out.row(1));
    CHECK(pi[3] == doctest::Approx(0.25));
    CHECK(pi[4] == doctest::Approx(0.75));
    CHECK(pt[0] == doctest::Approx(0.5));
    CHECK(pt[2] == doctest::Approx(0.5));
    CHECK(pt[1] == 0.0);

    const auto single = std::make_shared<ToyJointDistribution>(
        uniform_distribution(layout, {{4, 1}}, v));
    OracleDenoiser det(single, v);
    const auto d = det.predict(MaskedSequence{{m, m}, layout, 1, 1});
    CHECK(softmax(d.row(0))[4] == doctest::Approx(1.0));
    CHECK(softmax(d.row(1))[1] == doctest::Approx(1.0));

    CHECK(dist->entropy() == doctest::Approx(-0.5 * std::log(0.25) - 0.5 * std::log(0.5)));
    CHECK(dist->nll({4, 2}) == doctest::Approx(std::log(2.0)));
    CHECK(std::isinf(dist->nll({3, 2})));
}

TEST_CASE("toy distribution validation") {
    const auto v      = build_vocab(2, 2);
    const auto layout = make_layout(ModalityLayout::blocks(1, 1, 1));
    CHECK_THROWS(ToyJointDistribution(layout, {{2, 0}}, {0.9}, v));
    CHECK_THROWS(ToyJointDistribution(layout, {{0, 0}}, {1.0}, v));               // text id at image position
    CHECK_THROWS(ToyJointDistribution(layout, {{v.mask_id(), 0}}, {1.0}, v)); // not clean
    CHECK_THROWS(ToyJointDistribution(layout, {}, {}, v));

    const auto u = uniform_distribution(layout, {{2, 0}, {2, 1}, {3, 0}}, v);
    double s     = 0.0;
    for (double p : u.probabilities()) {
        s += p;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);

    Rng rng(3);
    std::vector<int> counts(3);
    for (int i = 0; i < 30000; ++i) {
        ++counts[u.sample_index(rng)];
    }
    for (int c : counts) {
        CHECK(std::abs(c - 10000) < 400);
    }
}

TEST_CASE("suppression and logits helpers") {
    const auto v      = build_vocab(2, 3);
    const auto layout = ModalityLayout::blocks(1, 1, 1);
    Logits l(2, static_cast<std::size_t>(v.total_size()), 0.5);
    suppress_invalid(l, layout, v);
    const auto p_img = softmax(l.row(0));
    CHECK(p_img[0] == 0.0);
    CHECK(p_img[1] == 0.0);
    CHECK(p_img[5] == 0.0); // mask
    CHECK(p_img[2] == doctest::Approx(1.0 / 3));
    const auto p_txt = softmax(l.row(1));
    CHECK(p_txt[0] == doctest::Approx(0.5));
    CHECK(p_txt[3] == 0.0);

    const auto u = uniform_logits(layout, v);
    CHECK(softmax(u.row(1))[1] == doctest::Approx(0.5));

    const std::vector<double> row{1.0, 2.0, kSuppressedLogit};
    CHECK(log_sum_exp(row) == doctest::Approx(std::log(std::exp(1.0) + std::exp(2.0))));
    CHECK(cross_entropy(row, 1) == doctest::Approx(std::log(1 + std::exp(-1.0))));
}

TEST_CASE("base denoiser has no cache") {
    struct Plain : Denoiser {
        JointVocab v = build_vocab(1, 1);
        const JointVocab & vocab() const override { return v; }
        DenoiserOutput predict(const MaskedSequence & x) const override { return Logits(x.length(), 3); }
    } plain;
    ImageKvCache cache;
    const auto layout = make_layout(ModalityLayout::blocks(1, 1, 1));
    CHECK_FALSE(plain.supports_image_cache());
    CHECK_THROWS_AS(plain.predict_cached(MaskedSequence{{1, 0}, layout, 0, 0}, cache, true), CapabilityError);
}
