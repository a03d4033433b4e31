#include "maskfuse/data.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

namespace maskfuse {

void ToyWorldConfig::validate() const {
    if (rows < 1 || cols < 1 || palette < 1 || templates < 1 || text_len < 1) {
        throw ConfigError("toy world dimensions must be positive");
    }
    if (enumerable) {
        double support = templates;
        for (int i = 0; i < rows * cols; ++i) {
            support *= palette;
            if (support > static_cast<double>(kMaxEnumerableSupport)) {
                throw ConfigError("enumerable toy world support exceeds " + std::to_string(kMaxEnumerableSupport));
            }
        }
    } else if (num_samples < 0) {
        throw ConfigError("num_samples must be nonnegative");
    }
}

ToyWorld::ToyWorld(ToyWorldConfig config) : config_(config) {
    config_.validate();
    const int cells = config_.rows * config_.cols;
    vocab_          = build_vocab(config_.templates + config_.palette + cells + 1, config_.palette);
    layout_         = make_layout(ModalityLayout::blocks(config_.rows, config_.cols, config_.text_len, config_.image_first));
}

std::size_t ToyWorld::support_size() const {
    std::size_t n = static_cast<std::size_t>(config_.templates);
    for (int i = 0; i < cells(); ++i) {
        n *= static_cast<std::size_t>(config_.palette);
    }
    return n;
}

std::vector<TokenId> ToyWorld::caption(const std::vector<int> & grid, int template_id) const {
    if (static_cast<int>(grid.size()) != cells()) {
        throw StructuralError("grid size does not match the toy world");
    }
    std::vector<int> counts(static_cast<std::size_t>(config_.palette), 0);
    for (int c : grid) {
        counts.at(static_cast<std::size_t>(c)) += 1;
    }
    const TokenId color_word0 = config_.templates;
    const TokenId count_word0 = config_.templates + config_.palette;
    std::vector<TokenId> words{static_cast<TokenId>(template_id)};
    for (int r = 0; static_cast<int>(words.size()) < config_.text_len; ++r) {
        const int color = (template_id + r) % config_.palette;
        words.push_back(color_word0 + color);
        words.push_back(count_word0 + counts[static_cast<std::size_t>(color)]);
    }
    words.resize(static_cast<std::size_t>(config_.text_len));
    return words;
}

std::vector<TokenId> ToyWorld::encode(const std::vector<int> & grid, int template_id) const {
    const auto text = caption(grid, template_id);
    std::vector<TokenId> tokens(layout_->length());
    const auto & img = layout_->positions(Modality::Image);
    const auto & txt = layout_->positions(Modality::Text);
    for (std::size_t k = 0; k < img.size(); ++k) {
        tokens[img[k]] = color_token(grid[k]);
    }
    for (std::size_t k = 0; k < txt.size(); ++k) {
        tokens[txt[k]] = text[k];
    }
    return tokens;
}

std::vector<int> ToyWorld::grid_of(const std::vector<TokenId> & tokens) const {
    std::vector<int> grid;
    for (std::size_t p : layout_->positions(Modality::Image)) {
        grid.push_back(tokens.at(p) - vocab_.text_size);
    }
    return grid;
}

std::string ToyWorld::token_name(TokenId id) const {
    if (vocab_.is_mask(id)) {
        return "[MASK]";
    }
    if (vocab_.is_image(id)) {
        return "px" + std::to_string(id - vocab_.text_size);
    }
    if (id < config_.templates) {
        return "T" + std::to_string(id);
    }
    if (id < config_.templates + config_.palette) {
        return "color" + std::to_string(id - config_.templates);
    }
    return "n" + std::to_string(id - config_.templates - config_.palette);
}

ToyDataset generate_toy_dataset(const ToyWorldConfig & config) {
    ToyDataset out;
    auto world  = std::make_shared<const ToyWorld>(config);
    out.data.vocab  = world->vocab();
    out.data.layout = world->layout();
    const int cells = world->cells();
    if (config.enumerable) {
        const std::size_t n_grids = world->support_size() / static_cast<std::size_t>(config.templates);
        for (int tmpl = 0; tmpl < config.templates; ++tmpl) {
            for (std::size_t g = 0; g < n_grids; ++g) {
                std::vector<int> grid(static_cast<std::size_t>(cells));
                std::size_t rest = g;
                for (int c = 0; c < cells; ++c) {
                    grid[static_cast<std::size_t>(c)] = static_cast<int>(rest % static_cast<std::size_t>(config.palette));
                    rest /= static_cast<std::size_t>(config.palette);
                }
                out.data.sequences.push_back(world->encode(grid, tmpl));
            }
        }
        out.distribution = std::make_shared<const ToyJointDistribution>(
            uniform_distribution(out.data.layout, out.data.sequences, out.data.vocab));
    } else {
        Rng rng = Rng(config.seed).substream("toy-world");
        for (int s = 0; s < config.num_samples; ++s) {
            std::vector<int> grid(static_cast<std::size_t>(cells));
            for (int & c : grid) {
                c = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.palette)));
            }
            const int tmpl = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.templates)));
            out.data.sequences.push_back(world->encode(grid, tmpl));
        }
    }
    out.world = std::move(world);
    return out;
}

namespace {

constexpr char kShardMagic[5]          = {'M', 'F', 'T', 'S', '1'};
constexpr std::uint32_t kShardVersion  = 1;

void put_u32(std::ostream & os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

void put_u64(std::ostream & os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

std::uint64_t get_le(std::istream & is, int bytes, const char * what) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        char c = 0;
        if (!is.get(c)) {
            throw FormatError(FormatErrorKind::Truncated, std::string("shard truncated while reading ") + what);
        }
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

} // namespace

void write_shard(const Dataset & dataset, const std::filesystem::path & path) {
    if (!dataset.layout) {
        throw StructuralError("dataset has no layout");
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        auto report = validate_sequence(dataset.at(i), dataset.vocab);
        if (!report) {
            throw PreconditionError("dataset sequence " + std::to_string(i) + " invalid: " + report.message);
        }
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
    }
    const ModalityLayout & layout = *dataset.layout;
    os.write(kShardMagic, 5);
    put_u32(os, kShardVersion);
    put_u32(os, static_cast<std::uint32_t>(dataset.vocab.text_size));
    put_u32(os, static_cast<std::uint32_t>(dataset.vocab.image_size));
    put_u32(os, static_cast<std::uint32_t>(layout.length()));
    put_u32(os, static_cast<std::uint32_t>(layout.image_rows()));
    put_u32(os, static_cast<std::uint32_t>(layout.image_cols()));
    for (Modality m : layout.tags()) {
        os.put(static_cast<char>(m));
    }
    put_u64(os, dataset.size());
    for (const auto & seq : dataset.sequences) {
        for (TokenId t : seq) {
            const auto v = static_cast<std::uint16_t>(t);
            os.put(static_cast<char>(v & 0xffU));
            os.put(static_cast<char>(v >> 8));
        }
    }
    if (!os) {
        throw FormatError(FormatErrorKind::Io, "failed writing shard " + path.string());
    }
}

Dataset read_shard(const std::filesystem::path & path, std::optional<JointVocab> expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError(FormatErrorKind::Io, "cannot open shard " + path.string());
    }
    char magic[5] = {};
    if (!is.read(magic, 5)) {
        throw FormatError(FormatErrorKind::Truncated, "shard shorter than its magic");
    }
    if (std::memcmp(magic, kShardMagic, 5) != 0) {
        throw FormatError(FormatErrorKind::MagicMismatch, "not a token shard (magic mismatch): " + path.string());
    }
    const auto version = static_cast<std::uint32_t>(get_le(is, 4, "version"));
    if (version != kShardVersion) {
        throw FormatError(FormatErrorKind::VersionMismatch, "unsupported shard version " + std::to_string(version));
    }
    const auto text_size  = static_cast<std::int32_t>(get_le(is, 4, "vocab"));
    const auto image_size = static_cast<std::int32_t>(get_le(is, 4, "vocab"));
    const auto length     = static_cast<std::size_t>(get_le(is, 4, "layout"));
    const auto rows       = static_cast<int>(get_le(is, 4, "layout"));
    const auto cols       = static_cast<int>(get_le(is, 4, "layout"));
    std::vector<Modality> tags(length);
    for (auto & t : tags) {
        const auto b = get_le(is, 1, "layout tags");
        if (b > 1) {
            throw FormatError(FormatErrorKind::InvalidContent, "bad modality tag in shard header");
        }
        t = static_cast<Modality>(b);
    }
    Dataset ds;
    try {
        ds.vocab  = build_vocab(text_size, image_size);
        ds.layout = make_layout(ModalityLayout(std::move(tags), rows, cols));
    } catch (const ConfigError & e) {
        throw FormatError(FormatErrorKind::InvalidContent, std::string("shard header invalid: ") + e.what());
    }
    if (expected && !(*expected == ds.vocab)) {
        throw FormatError(FormatErrorKind::VocabMismatch,
                          "shard vocab (" + std::to_string(text_size) + "," + std::to_string(image_size) +
                              ") does not match the run config (" + std::to_string(expected->text_size) + "," +
                              std::to_string(expected->image_size) + ")");
    }
    const auto count = get_le(is, 8, "count");
    ds.sequences.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 20)));
    for (std::uint64_t s = 0; s < count; ++s) {
        std::vector<TokenId> seq(length);
        for (auto & t : seq) {
            t = static_cast<TokenId>(get_le(is, 2, "payload"));
        }
        auto report = validate_sequence(clean_sequence(seq, ds.layout), ds.vocab);
        if (!report) {
            throw FormatError(FormatErrorKind::InvalidContent, "shard sequence " + std::to_string(s) + ": " + report.message);
        }
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

BatchIterator::BatchIterator(const Dataset & dataset, std::size_t batch_size, double flip_prob, Rng rng)
    : dataset_(&dataset), batch_size_(batch_size), flip_prob_(flip_prob), rng_(rng), flip_rng_(rng.substream("flip")) {
    if (batch_size_ < 1) {
        throw ConfigError("batch size must be at least 1");
    }
    if (dataset.size() == 0) {
        throw PreconditionError("batch iterator over an empty dataset");
    }
    flipped_layout_ = make_layout(dataset.layout->flipped());
    reshuffle();
}

void BatchIterator::reshuffle() {
    order_.resize(dataset_->size());
    std::iota(order_.begin(), order_.end(), 0);
    Rng shuffle = rng_.substream(static_cast<std::uint64_t>(epoch_));
    for (std::size_t i = order_.size(); i > 1; --i) {
        std::swap(order_[i - 1], order_[shuffle.below(i)]);
    }
    cursor_ = 0;
}

std::vector<Sample> BatchIterator::next_batch() {
    std::vector<Sample> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        Sample s;
        s.sequence = dataset_->at(order_[cursor_++]);
        if (flip_prob_ > 0.0 && flip_rng_.bernoulli(flip_prob_)) {
            s.sequence.tokens = relayout_tokens(s.sequence.tokens, *dataset_->layout, *flipped_layout_);
            s.sequence.layout = flipped_layout_;
            s.flipped         = true;
        }
        batch.push_back(std::move(s));
    }
    return batch;
}

} // namespace maskfuse
