#include "helpers.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/eval.hpp"

#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

using namespace maskfuse;

TEST_CASE("token entropy") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    const JointVocab & v = d.data.vocab;
    // Constant-token generations: one repeated id per modality.
    auto constant = d.data.at(4);
    for (std::size_t p = 0; p < constant.length(); ++p) {
        constant.tokens[p] = v.range_begin(constant.tag(p));
    }
    std::vector<MaskedSequence> same(10, constant);
    const auto zero = token_entropy(same, v);
    CHECK(zero.text == doctest::Approx(0.0));
    CHECK(zero.image == doctest::Approx(0.0));

    // Every text id once per sequence, text only.
    const JointVocab tv = build_vocab(5, 1);
    const auto layout   = make_layout(ModalityLayout::blocks(0, 0, 5));
    std::vector<MaskedSequence> flat;
    for (int s = 0; s < 3; ++s) {
        flat.push_back(clean_sequence({0, 1, 2, 3, 4}, layout));
    }
    const auto full = token_entropy(flat, tv);
    CHECK(full.overall == doctest::Approx(std::log(5.0)));
    CHECK(full.text == doctest::Approx(std::log(5.0)));
    CHECK_THROWS_AS(token_entropy({}, v), PreconditionError);
}

TEST_CASE("retrieval scoring rules") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    RetrievalTask task;
    for (std::size_t i = 0; i < 4; ++i) {
        task.candidates.push_back(d.data.at(i));
    }
    task.correct_index = 2;
    CHECK_FALSE(run_retrieval(task, [](const MaskedSequence &, std::size_t) { return 1.0; }).correct);
    CHECK(run_retrieval(task, [](const MaskedSequence &, std::size_t i) { return i == 2 ? 1.0 : 0.0; }).correct);
    CHECK_FALSE(run_retrieval(task, [](const MaskedSequence &, std::size_t i) { return i >= 2 ? 1.0 : 0.0; }).correct);
    RetrievalTask bad = task;
    bad.candidates.resize(1);
    bad.correct_index = 0;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);

    // Random scores: chance accuracy.
    Rng rng(8);
    const auto tasks = planted_retrieval_tasks(d, RetrievalMode::Joint, 10000, 16, true, rng);
    std::vector<RetrievalOutcome> outcomes;
    Rng noise(9);
    for (const auto & t : tasks) {
        outcomes.push_back(run_retrieval(t, [&](const MaskedSequence &, std::size_t) { return noise.uniform(); }));
    }
    const auto s = summarize(outcomes);
    CHECK(s.n_tasks == 10000);
    CHECK(std::abs(s.accuracy - 1.0 / 16.0) < 4 * s.std_error);
    CHECK(s.std_error == doctest::Approx(std::sqrt(s.accuracy * (1 - s.accuracy) / 10000.0)));
    CHECK(parse_retrieval_mode(retrieval_mode_name(RetrievalMode::ImageGivenText)) == RetrievalMode::ImageGivenText);
    CHECK_THROWS_AS(parse_retrieval_mode("sideways"), ConfigError);
}

TEST_CASE("planted retrieval tasks") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    Rng rng(1);
    for (RetrievalMode mode : {RetrievalMode::Joint, RetrievalMode::ImageGivenText, RetrievalMode::TextGivenImage}) {
        const auto tasks = planted_retrieval_tasks(d, mode, 20, 8, true, rng);
        REQUIRE(tasks.size() == 20);
        std::set<std::size_t> positions;
        for (const auto & t : tasks) {
            CHECK(t.candidates.size() == 8);
            positions.insert(t.correct_index);
            std::set<std::vector<TokenId>> unique;
            for (std::size_t i = 0; i < t.candidates.size(); ++i) {
                unique.insert(t.candidates[i].tokens);
                const bool in_support = d.distribution->probability_of(t.candidates[i].tokens) > 0.0;
                CHECK(in_support == (i == t.correct_index));
                if (mode == RetrievalMode::ImageGivenText && i != t.correct_index) {
                    for (std::size_t p : d.data.layout->positions(Modality::Text)) {
                        CHECK(t.candidates[i].tokens[p] == t.candidates[t.correct_index].tokens[p]);
                    }
                }
            }
            CHECK(unique.size() == 8);
        }
        CHECK(positions.size() > 1);
    }

    OracleDenoiser oracle(d.distribution, d.data.vocab, OracleDenoiser::OnInconsistent::Uniform);
    Rng r2(3);
    const auto tasks = planted_retrieval_tasks(d, RetrievalMode::Joint, 30, 16, true, r2);
    std::vector<RetrievalOutcome> out;
    Rng score(4);
    for (const auto & t : tasks) {
        out.push_back(run_retrieval(oracle, t, 16, score));
    }
    CHECK(summarize(out).accuracy == 1.0);
}

TEST_CASE("retrieval sweep cells") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    OracleDenoiser oracle(d.distribution, d.data.vocab, OracleDenoiser::OnInconsistent::Uniform);
    Rng rng(6);
    const auto tasks = planted_retrieval_tasks(d, RetrievalMode::TextGivenImage, 10, 6, true, rng);
    const auto cells = retrieval_vs_steps_sweep(oracle, tasks, {2, 8}, {0.0, 1.5}, 42);
    REQUIRE(cells.size() == 4);
    Rng cell = Rng(42).substream("sweep").substream(1).substream(1);
    std::vector<RetrievalOutcome> manual;
    for (const auto & t : tasks) {
        manual.push_back(run_retrieval(oracle, t, 8, cell, Schedule::linear(), 1.5));
    }
    CHECK(cells[3].n_mc == 8);
    CHECK(cells[3].cfg_weight == 1.5);
    CHECK(cells[3].summary.accuracy == summarize(manual).accuracy);
    std::ostringstream csv;
    write_sweep_csv(cells, csv);
    CHECK(csv.str().rfind("n_mc,cfg_weight,accuracy,std_error,n_tasks\n", 0) == 0);
}

TEST_CASE("causal model retrieval") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    auto spec      = testing::tiny_spec(d.data.vocab, d.data.layout);
    spec.attention = Attention::Causal;
    Transformer model(spec, 3);
    Rng jr(1);
    for (double & p : model.parameters()) {
        p += 0.3 * (jr.uniform() * 2.0 - 1.0);
    }
    Rng rng(2);
    const auto tasks = planted_retrieval_tasks(d, RetrievalMode::Joint, 5, 4, true, rng);
    for (const auto & t : tasks) {
        const auto o = run_retrieval_ar(model, t);
        REQUIRE(o.scores.size() == t.candidates.size());
        for (std::size_t i = 0; i < t.candidates.size(); ++i) {
            CHECK(o.scores[i] == doctest::Approx(-ar_sequence_nll(model, t.candidates[i])));
        }
    }
}

TEST_CASE("generative likelihood") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    std::vector<MaskedSequence> s{d.data.at(0), d.data.at(1)};
    const double per_token = std::log(16.0) / double(d.data.layout->length());
    CHECK(generative_nll(*d.distribution, s) == doctest::Approx(per_token));
    auto oos = d.data.at(0);
    oos.tokens[d.data.layout->positions(Modality::Text)[0]] = d.data.vocab.text_size - 1;
    s.push_back(oos);
    CHECK(std::isinf(generative_nll(*d.distribution, s)));
}

TEST_CASE("repetition-friendly scorer") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    const JointVocab & v = d.data.vocab;
    auto constant = d.data.at(0);
    for (std::size_t p = 0; p < constant.length(); ++p) {
        constant.tokens[p] = v.range_begin(constant.tag(p));
    }
    std::vector<MaskedSequence> real;
    for (std::size_t i = 0; i < d.data.size(); ++i) {
        real.push_back(d.data.at(i));
    }
    const std::vector<MaskedSequence> degenerate(16, constant);
    CHECK(repetition_scorer_nll(degenerate, v) < repetition_scorer_nll(real, v));
    CHECK(token_entropy(degenerate, v).text < token_entropy(real, v).text);
    CHECK(std::isinf(generative_nll(*d.distribution, degenerate)));

    const JointVocab tv  = build_vocab(4, 1);
    const auto layout    = make_layout(ModalityLayout::blocks(0, 0, 3));
    const double one_seq = repetition_scorer_nll({clean_sequence({1, 1, 2}, layout)}, tv, 0.5);
    CHECK(one_seq == doctest::Approx((std::log(4.0) - std::log(0.5) - std::log(0.5 / 3.0)) / 3.0));
    CHECK_THROWS_AS(repetition_scorer_nll({}, tv), PreconditionError);
}
