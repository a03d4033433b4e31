#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace maskfuse {

using TokenId = std::int32_t;

enum class Modality : std::uint8_t { Text = 0, Image = 1 };

const char * modality_name(Modality m) noexcept;

// Joint id space: text ids, then image ids, then a single shared mask id.
struct JointVocab {
    std::int32_t text_size  = 0;
    std::int32_t image_size = 0;

    TokenId mask_id() const noexcept { return text_size + image_size; }
    std::int32_t total_size() const noexcept { return text_size + image_size + 1; }

    bool is_text(TokenId id) const noexcept { return id >= 0 && id < text_size; }
    bool is_image(TokenId id) const noexcept { return id >= text_size && id < text_size + image_size; }
    bool is_mask(TokenId id) const noexcept { return id == mask_id(); }

    // Half-open id range of clean tokens for a modality.
    TokenId range_begin(Modality m) const noexcept { return m == Modality::Text ? 0 : text_size; }
    TokenId range_end(Modality m) const noexcept { return m == Modality::Text ? text_size : text_size + image_size; }
    std::int32_t modality_size(Modality m) const noexcept { return m == Modality::Text ? text_size : image_size; }

    bool operator==(const JointVocab &) const = default;
};

JointVocab build_vocab(std::int32_t text_size, std::int32_t image_size);

// Per-position modality tags plus the image grid. The image positions form
// one contiguous block read in row-major order.
class ModalityLayout {
public:
    ModalityLayout(std::vector<Modality> tags, int image_rows, int image_cols);

    // Image block of rows x cols followed (or preceded) by text_len text positions.
    static ModalityLayout blocks(int image_rows, int image_cols, int text_len, bool image_first = true);

    std::size_t length() const noexcept { return tags_.size(); }
    Modality tag(std::size_t pos) const { return tags_.at(pos); }
    const std::vector<Modality> & tags() const noexcept { return tags_; }

    int image_rows() const noexcept { return rows_; }
    int image_cols() const noexcept { return cols_; }
    std::size_t count(Modality m) const noexcept { return m == Modality::Text ? n_text_ : n_image_; }
    bool image_first() const noexcept { return image_first_; }

    // Index of a position within its own modality block.
    std::size_t modality_index(std::size_t pos) const { return index_.at(pos); }
    int grid_row(std::size_t pos) const { return static_cast<int>(index_.at(pos)) / cols_; }
    int grid_col(std::size_t pos) const { return static_cast<int>(index_.at(pos)) % cols_; }

    const std::vector<std::size_t> & positions(Modality m) const noexcept {
        return m == Modality::Text ? text_positions_ : image_positions_;
    }

    // Same grid and text length with the block order swapped.
    ModalityLayout flipped() const;

    bool same_shape(const ModalityLayout & other) const noexcept;
    bool operator==(const ModalityLayout & other) const noexcept {
        return tags_ == other.tags_ && rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    std::vector<Modality> tags_;
    int rows_ = 0;
    int cols_ = 0;
    std::size_t n_text_  = 0;
    std::size_t n_image_ = 0;
    bool image_first_    = true;
    std::vector<std::size_t> index_;
    std::vector<std::size_t> text_positions_;
    std::vector<std::size_t> image_positions_;
};

using LayoutPtr = std::shared_ptr<const ModalityLayout>;

inline LayoutPtr make_layout(ModalityLayout layout) {
    return std::make_shared<const ModalityLayout>(std::move(layout));
}

struct MaskedSequence {
    std::vector<TokenId> tokens;
    LayoutPtr layout;
    double t_text  = 0.0;
    double t_image = 0.0;

    std::size_t length() const noexcept { return tokens.size(); }
    Modality tag(std::size_t pos) const { return layout->tag(pos); }
    std::size_t count_masked(const JointVocab & vocab) const noexcept;
    std::size_t count_masked(const JointVocab & vocab, Modality m) const;
};

// Clean sequence with both times at zero.
MaskedSequence clean_sequence(std::vector<TokenId> tokens, LayoutPtr layout);

std::vector<TokenId> allowed_token_set(std::size_t position, const ModalityLayout & layout, const JointVocab & vocab);

struct ValidationReport {
    bool ok = true;
    std::optional<std::size_t> first_violation;
    std::string message;

    explicit operator bool() const noexcept { return ok; }
};

// Throws StructuralError if the token count disagrees with the layout.
ValidationReport validate_sequence(const MaskedSequence & seq, const JointVocab & vocab);

// Reorders tokens of a sequence laid out by `from` into the order of `to`.
// Both layouts must have the same shape.
std::vector<TokenId> relayout_tokens(const std::vector<TokenId> & tokens, const ModalityLayout & from,
                                     const ModalityLayout & to);

} // namespace maskfuse
