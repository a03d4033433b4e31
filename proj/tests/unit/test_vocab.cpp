#include "maskfuse/errors.hpp"
#include "maskfuse/vocab.hpp"

#include <doctest.h>

#include <set>

using namespace maskfuse;

TEST_CASE("joint vocab partition") {
    auto v = build_vocab(4, 4);
    CHECK(v.mask_id() == 8);
    CHECK(v.total_size() == 9);
    v = build_vocab(1, 1);
    CHECK(v.mask_id() == 2);
    CHECK(v.total_size() == 3);
    v = build_vocab(32, 64);
    CHECK(v.mask_id() == 96);
    CHECK(v.total_size() == 97);

    CHECK_THROWS_AS(build_vocab(0, 4), ConfigError);
    CHECK_THROWS_AS(build_vocab(4, 0), ConfigError);
    CHECK_THROWS_AS(build_vocab(40000, 40000), ConfigError);

    v = build_vocab(3, 5);
    for (TokenId id = 0; id < v.total_size(); ++id) {
        CHECK(int(v.is_text(id)) + int(v.is_image(id)) + int(v.is_mask(id)) == 1);
    }
}

TEST_CASE("allowed token sets") {
    const auto v      = build_vocab(4, 4);
    const auto layout = ModalityLayout::blocks(1, 1, 1, false); // [text, image]
    CHECK(allowed_token_set(0, layout, v) == std::vector<TokenId>{0, 1, 2, 3, 8});
    CHECK(allowed_token_set(1, layout, v) == std::vector<TokenId>{4, 5, 6, 7, 8});
    CHECK_THROWS_AS(allowed_token_set(2, layout, v), IndexError);

    const auto v1 = build_vocab(1, 1);
    CHECK(allowed_token_set(0, layout, v1) == std::vector<TokenId>{0, 2});

    const auto big    = build_vocab(5, 7);
    const auto layout2 = ModalityLayout::blocks(2, 3, 4);
    std::set<TokenId> all;
    for (std::size_t p = 0; p < layout2.length(); ++p) {
        const auto s = allowed_token_set(p, layout2, big);
        CHECK(s.size() == std::size_t(big.modality_size(layout2.tag(p)) + 1));
        all.insert(s.begin(), s.end());
    }
    CHECK(all.size() == std::size_t(big.total_size()));
}

TEST_CASE("layout structure") {
    const auto l = ModalityLayout::blocks(2, 3, 4);
    CHECK(l.length() == 10);
    CHECK(l.image_first());
    CHECK(l.count(Modality::Image) == 6);
    CHECK(l.grid_row(4) == 1);
    CHECK(l.grid_col(4) == 1);
    CHECK(l.modality_index(7) == 1);

    const auto f = l.flipped();
    CHECK_FALSE(f.image_first());
    CHECK(f.tag(0) == Modality::Text);
    CHECK(f.same_shape(l));

    CHECK_THROWS_AS(ModalityLayout({Modality::Image, Modality::Text, Modality::Image}, 1, 2), ConfigError);
    CHECK_THROWS_AS(ModalityLayout({Modality::Image, Modality::Image}, 1, 3), ConfigError);

    const std::vector<TokenId> x{10, 11, 12, 13, 14, 15, 0, 1, 2, 3};
    const auto y = relayout_tokens(x, l, f);
    CHECK(y == std::vector<TokenId>{0, 1, 2, 3, 10, 11, 12, 13, 14, 15});
    CHECK(relayout_tokens(y, f, l) == x);
}

TEST_CASE("sequence validation") {
    const auto v      = build_vocab(4, 4);
    const auto layout = make_layout(ModalityLayout::blocks(1, 2, 2)); // image, image, text, text

    MaskedSequence all_mask{{8, 8, 8, 8}, layout, 1.0, 1.0};
    CHECK(validate_sequence(all_mask, v).ok);

    MaskedSequence bad{{4, 1, 0, 8}, layout, 0.5, 0.5};
    const auto r = validate_sequence(bad, v);
    CHECK_FALSE(r.ok);
    REQUIRE(r.first_violation);
    CHECK(*r.first_violation == 1);

    MaskedSequence ok{{4, 7, 0, 3}, layout, 0.0, 0.0};
    CHECK(validate_sequence(ok, v).ok);

    MaskedSequence short_seq{{4, 7, 0}, layout, 0.0, 0.0};
    CHECK_THROWS_AS(validate_sequence(short_seq, v), StructuralError);

    MaskedSequence bad_time{{4, 7, 0, 3}, layout, 1.5, 0.0};
    CHECK_FALSE(validate_sequence(bad_time, v).ok);
}
