#include "helpers.hpp"

#include "maskfuse/data.hpp"
#include "maskfuse/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

using namespace maskfuse;

namespace {

void truncate_file(const std::filesystem::path & p, std::uintmax_t keep) { std::filesystem::resize_file(p, keep); }

} // namespace

TEST_CASE("toy world enumeration") {
    const ToyDataset d = generate_toy_dataset(ToyWorldConfig{});
    CHECK(d.data.size() == 16);
    CHECK(d.world->support_size() == 16);
    REQUIRE(d.distribution);
    CHECK(d.distribution->size() == 16);
    CHECK(d.distribution->entropy() == doctest::Approx(std::log(16.0)));
    std::set<std::vector<TokenId>> unique(d.data.sequences.begin(), d.data.sequences.end());
    CHECK(unique.size() == 16);
    for (std::size_t i = 0; i < d.data.size(); ++i) {
        CHECK(validate_sequence(d.data.at(i), d.data.vocab).ok);
    }

    ToyWorldConfig tiny;
    tiny.rows = tiny.cols = 1;
    CHECK(generate_toy_dataset(tiny).data.size() == 2);

    ToyWorldConfig big;
    big.rows = big.cols = 4;
    big.palette         = 3;
    CHECK_THROWS_AS(generate_toy_dataset(big), ConfigError);
    big.enumerable  = false;
    big.num_samples = 50;
    const auto sampled = generate_toy_dataset(big);
    CHECK(sampled.data.size() == 50);
    CHECK_FALSE(sampled.distribution);
    CHECK(generate_toy_dataset(big).data.sequences == sampled.data.sequences);
    big.seed = 1;
    CHECK(generate_toy_dataset(big).data.sequences != sampled.data.sequences);
}

TEST_CASE("captions are a function of the grid") {
    ToyWorldConfig c;
    c.templates = 2;
    c.text_len  = 5;
    const ToyWorld w(c);
    const std::vector<int> grid{0, 1, 1, 1};
    CHECK(w.caption(grid, 1) == w.caption(grid, 1));
    CHECK(w.caption(grid, 0) != w.caption(grid, 1));
    // Permuting cells leaves counts, and so the caption, unchanged.
    CHECK(w.caption({1, 1, 0, 1}, 0) == w.caption(grid, 0));
    CHECK(w.caption({0, 0, 1, 1}, 0) != w.caption(grid, 0));
    const auto tokens = w.encode(grid, 0);
    CHECK(w.grid_of(tokens) == grid);
    CHECK(w.token_name(w.vocab().mask_id()) == "[MASK]");
    CHECK_THROWS_AS(w.caption({0, 1}, 0), StructuralError);
}

TEST_CASE("shard round trip") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        ToyWorldConfig c;
        c.rows        = 1 + int(rng.below(3));
        c.cols        = 1 + int(rng.below(3));
        c.palette     = 1 + int(rng.below(4));
        c.text_len    = 1 + int(rng.below(6));
        c.enumerable  = false;
        c.num_samples = int(rng.below(40));
        c.image_first = rng.bernoulli(0.5);
        c.seed        = rng.next_u64();
        const auto d  = generate_toy_dataset(c);
        const auto p  = testing::temp_path("shard.mfts");
        write_shard(d.data, p);
        const Dataset back = read_shard(p, d.data.vocab);
        CHECK(back.vocab == d.data.vocab);
        CHECK(*back.layout == *d.data.layout);
        CHECK(back.sequences == d.data.sequences);
        std::filesystem::remove(p);
    }
}

TEST_CASE("shard failures") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    const auto p = testing::temp_path("bad.mfts");
    write_shard(d.data, p);
    const auto size = std::filesystem::file_size(p);

    auto kind_of = [&](std::optional<JointVocab> v = std::nullopt) {
        try {
            read_shard(p, v);
        } catch (const FormatError & e) {
            return e.kind();
        }
        FAIL("expected a format error");
        return FormatErrorKind::Io;
    };

    CHECK(kind_of(build_vocab(3, 3)) == FormatErrorKind::VocabMismatch);

    truncate_file(p, size - 3);
    CHECK(kind_of() == FormatErrorKind::Truncated);

    {
        std::ofstream os(p, std::ios::binary | std::ios::trunc);
        os << "NOPE1 and some more bytes";
    }
    CHECK(kind_of() == FormatErrorKind::MagicMismatch);
    std::filesystem::remove(p);
    CHECK(kind_of() == FormatErrorKind::Io);

    Dataset empty{d.data.vocab, d.data.layout, {}};
    write_shard(empty, p);
    const auto back = read_shard(p);
    CHECK(back.size() == 0);
    CHECK(*back.layout == *d.data.layout);
    std::filesystem::remove(p);
}

TEST_CASE("batches and modality flips") {
    const auto d = generate_toy_dataset(ToyWorldConfig{});
    CHECK_THROWS_AS(BatchIterator(d.data, 0, 0.0, Rng(0)), ConfigError);
    Dataset empty{d.data.vocab, d.data.layout, {}};
    CHECK_THROWS_AS(BatchIterator(empty, 4, 0.0, Rng(0)), PreconditionError);

    BatchIterator a(d.data, 16, 0.0, Rng(3));
    BatchIterator b(d.data, 16, 0.0, Rng(3));
    for (int e = 0; e < 3; ++e) {
        const auto ba = a.next_batch();
        const auto bb = b.next_batch();
        std::set<std::vector<TokenId>> seen;
        for (std::size_t i = 0; i < ba.size(); ++i) {
            CHECK(ba[i].sequence.tokens == bb[i].sequence.tokens);
            seen.insert(ba[i].sequence.tokens);
        }
        // One batch of the dataset size is exactly one epoch.
        CHECK(seen.size() == 16);
    }
    CHECK(a.epoch() == 2);

    BatchIterator f(d.data, 1000, 0.2, Rng(4));
    std::size_t flipped = 0, total = 0;
    for (int k = 0; k < 100; ++k) {
        for (const auto & s : f.next_batch()) {
            ++total;
            if (s.flipped) {
                ++flipped;
                CHECK_FALSE(s.sequence.layout->image_first());
                CHECK(relayout_tokens(s.sequence.tokens, *s.sequence.layout, *d.data.layout) ==
                      d.distribution->sequence(*d.distribution->index_of(
                          relayout_tokens(s.sequence.tokens, *s.sequence.layout, *d.data.layout))));
            }
        }
    }
    const double rate = double(flipped) / double(total);
    const double se   = std::sqrt(0.2 * 0.8 / double(total));
    CHECK(std::abs(rate - 0.2) < 3 * se);
}
