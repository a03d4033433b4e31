#pragma once

#include "maskfuse/denoiser.hpp"
#include "maskfuse/rng.hpp"
#include "maskfuse/vocab.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace maskfuse {

struct ToyWorldConfig {
    int rows        = 2;
    int cols        = 2;
    int palette     = 2; // image vocab: one token per color
    int templates   = 1;
    int text_len    = 3;
    std::uint64_t seed = 0;
    bool enumerable = true;
    int num_samples = 1024; // used when not enumerable
    bool image_first = true;

    void validate() const;
};

inline constexpr std::size_t kMaxEnumerableSupport = 4096;

// Grids of colored cells paired with a caption that is a pure function of the
// grid: a template word followed by (color word, count word) pairs.
class ToyWorld {
public:
    explicit ToyWorld(ToyWorldConfig config);

    const ToyWorldConfig & config() const noexcept { return config_; }
    const JointVocab & vocab() const noexcept { return vocab_; }
    const LayoutPtr & layout() const noexcept { return layout_; }
    int cells() const noexcept { return config_.rows * config_.cols; }

    // Number of (grid, template) pairs.
    std::size_t support_size() const;

    TokenId color_token(int color) const { return vocab_.text_size + color; }
    std::vector<TokenId> caption(const std::vector<int> & grid, int template_id) const;
    std::vector<TokenId> encode(const std::vector<int> & grid, int template_id) const;
    std::vector<int> grid_of(const std::vector<TokenId> & tokens) const;

    std::string token_name(TokenId id) const;

private:
    ToyWorldConfig config_;
    JointVocab vocab_;
    LayoutPtr layout_;
};

struct Dataset {
    JointVocab vocab;
    LayoutPtr layout;
    std::vector<std::vector<TokenId>> sequences;

    std::size_t size() const noexcept { return sequences.size(); }
    MaskedSequence at(std::size_t i) const { return clean_sequence(sequences.at(i), layout); }
};

struct ToyDataset {
    std::shared_ptr<const ToyWorld> world;
    Dataset data;
    // Exact joint distribution; set in enumerable mode.
    std::shared_ptr<const ToyJointDistribution> distribution;
};

// Enumerable mode lists every (grid, template) pair once with a uniform
// distribution; otherwise num_samples pairs are drawn from the config seed.
ToyDataset generate_toy_dataset(const ToyWorldConfig & config);

void write_shard(const Dataset & dataset, const std::filesystem::path & path);
// Throws FormatError; `expected` checks the header vocab against a run config.
Dataset read_shard(const std::filesystem::path & path, std::optional<JointVocab> expected = std::nullopt);

struct Sample {
    MaskedSequence sequence;
    bool flipped = false; // text block moved first
};

// Deterministic shuffled epochs; each drawn sample is flipped to text-first
// order with probability flip_prob.
class BatchIterator {
public:
    BatchIterator(const Dataset & dataset, std::size_t batch_size, double flip_prob, Rng rng);

    std::vector<Sample> next_batch();
    std::size_t epoch() const noexcept { return epoch_; }

private:
    void reshuffle();

    const Dataset * dataset_;
    std::size_t batch_size_;
    double flip_prob_;
    Rng rng_;
    Rng flip_rng_;
    LayoutPtr flipped_layout_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_  = 0;
};

} // namespace maskfuse
