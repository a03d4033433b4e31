#include "maskfuse/vocab.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <string>

namespace maskfuse {

const char * modality_name(Modality m) noexcept {
    return m == Modality::Text ? "text" : "image";
}

JointVocab build_vocab(std::int32_t text_size, std::int32_t image_size) {
    if (text_size < 1 || image_size < 1) {
        throw ConfigError("vocab sizes must be positive (text=" + std::to_string(text_size) +
                          ", image=" + std::to_string(image_size) + ")");
    }
    if (static_cast<std::int64_t>(text_size) + image_size + 1 > 65535) {
        throw ConfigError("joint vocab exceeds 16-bit token id range");
    }
    return JointVocab{text_size, image_size};
}

ModalityLayout::ModalityLayout(std::vector<Modality> tags, int image_rows, int image_cols)
    : tags_(std::move(tags)), rows_(image_rows), cols_(image_cols) {
    if (rows_ < 0 || cols_ < 0) {
        throw ConfigError("image grid dimensions must be nonnegative");
    }
    index_.resize(tags_.size());
    std::size_t first_image = tags_.size();
    std::size_t last_image  = 0;
    for (std::size_t i = 0; i < tags_.size(); ++i) {
        if (tags_[i] == Modality::Image) {
            index_[i] = n_image_++;
            image_positions_.push_back(i);
            first_image = std::min(first_image, i);
            last_image  = i;
        } else {
            index_[i] = n_text_++;
            text_positions_.push_back(i);
        }
    }
    if (n_image_ > 0 && last_image - first_image + 1 != n_image_) {
        throw ConfigError("image positions must form one contiguous block");
    }
    if (static_cast<std::size_t>(rows_) * static_cast<std::size_t>(cols_) != n_image_) {
        throw ConfigError("image grid " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                          " does not match " + std::to_string(n_image_) + " image positions");
    }
    image_first_ = n_image_ == 0 || n_text_ == 0 || first_image == 0;
}

ModalityLayout ModalityLayout::blocks(int image_rows, int image_cols, int text_len, bool image_first) {
    if (image_rows < 0 || image_cols < 0 || text_len < 0) {
        throw ConfigError("layout block sizes must be nonnegative");
    }
    const auto n_image = static_cast<std::size_t>(image_rows) * static_cast<std::size_t>(image_cols);
    std::vector<Modality> tags;
    tags.reserve(n_image + static_cast<std::size_t>(text_len));
    auto push = [&](Modality m, std::size_t n) { tags.insert(tags.end(), n, m); };
    if (image_first) {
        push(Modality::Image, n_image);
        push(Modality::Text, static_cast<std::size_t>(text_len));
    } else {
        push(Modality::Text, static_cast<std::size_t>(text_len));
        push(Modality::Image, n_image);
    }
    return ModalityLayout(std::move(tags), image_rows, image_cols);
}

ModalityLayout ModalityLayout::flipped() const {
    return blocks(rows_, cols_, static_cast<int>(n_text_), !image_first_);
}

bool ModalityLayout::same_shape(const ModalityLayout & other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_ && n_text_ == other.n_text_ && n_image_ == other.n_image_;
}

std::size_t MaskedSequence::count_masked(const JointVocab & vocab) const noexcept {
    std::size_t n = 0;
    for (TokenId t : tokens) {
        n += vocab.is_mask(t) ? 1 : 0;
    }
    return n;
}

std::size_t MaskedSequence::count_masked(const JointVocab & vocab, Modality m) const {
    std::size_t n = 0;
    for (std::size_t p : layout->positions(m)) {
        n += vocab.is_mask(tokens[p]) ? 1 : 0;
    }
    return n;
}

MaskedSequence clean_sequence(std::vector<TokenId> tokens, LayoutPtr layout) {
    MaskedSequence s;
    s.tokens = std::move(tokens);
    s.layout = std::move(layout);
    return s;
}

std::vector<TokenId> allowed_token_set(std::size_t position, const ModalityLayout & layout, const JointVocab & vocab) {
    if (position >= layout.length()) {
        throw IndexError("position " + std::to_string(position) + " outside layout of length " +
                         std::to_string(layout.length()));
    }
    const Modality m = layout.tag(position);
    std::vector<TokenId> out;
    out.reserve(static_cast<std::size_t>(vocab.modality_size(m)) + 1);
    for (TokenId id = vocab.range_begin(m); id < vocab.range_end(m); ++id) {
        out.push_back(id);
    }
    out.push_back(vocab.mask_id());
    return out;
}

ValidationReport validate_sequence(const MaskedSequence & seq, const JointVocab & vocab) {
    if (!seq.layout) {
        throw StructuralError("sequence has no layout");
    }
    if (seq.tokens.size() != seq.layout->length()) {
        throw StructuralError("sequence length " + std::to_string(seq.tokens.size()) +
                              " does not match layout length " + std::to_string(seq.layout->length()));
    }
    ValidationReport report;
    if (!(seq.t_text >= 0.0 && seq.t_text <= 1.0 && seq.t_image >= 0.0 && seq.t_image <= 1.0)) {
        report.ok      = false;
        report.message = "sequence times outside [0,1]";
        return report;
    }
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        const TokenId t   = seq.tokens[i];
        const Modality m  = seq.layout->tag(i);
        const bool in_mod = t >= vocab.range_begin(m) && t < vocab.range_end(m);
        if (!in_mod && !vocab.is_mask(t)) {
            report.ok              = false;
            report.first_violation = i;
            report.message         = "token " + std::to_string(t) + " at position " + std::to_string(i) +
                             " is not a valid " + modality_name(m) + " id";
            return report;
        }
    }
    return report;
}

std::vector<TokenId> relayout_tokens(const std::vector<TokenId> & tokens, const ModalityLayout & from,
                                     const ModalityLayout & to) {
    if (!from.same_shape(to) || tokens.size() != from.length()) {
        throw StructuralError("relayout between incompatible layouts");
    }
    std::vector<TokenId> out(tokens.size());
    for (Modality m : {Modality::Image, Modality::Text}) {
        const auto & src = from.positions(m);
        const auto & dst = to.positions(m);
        for (std::size_t k = 0; k < src.size(); ++k) {
            out[dst[k]] = tokens[src[k]];
        }
    }
    return out;
}

} // namespace maskfuse
