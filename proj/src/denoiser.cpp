#include "maskfuse/denoiser.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace maskfuse {

DenoiserOutput Denoiser::predict_cached(const MaskedSequence &, ImageKvCache &, bool) const {
    throw CapabilityError("this denoiser does not support image key/value caching");
}

ToyJointDistribution::ToyJointDistribution(LayoutPtr layout, std::vector<std::vector<TokenId>> sequences,
                                           std::vector<double> probs, const JointVocab & vocab)
    : layout_(std::move(layout)), sequences_(std::move(sequences)), probs_(std::move(probs)) {
    if (!layout_) {
        throw StructuralError("distribution needs a layout");
    }
    if (sequences_.empty() || sequences_.size() != probs_.size()) {
        throw ConfigError("distribution support must be nonempty with one probability per sequence");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < sequences_.size(); ++i) {
        if (!(probs_[i] >= 0.0)) {
            throw ConfigError("negative probability in distribution");
        }
        MaskedSequence s = clean_sequence(sequences_[i], layout_);
        auto report      = validate_sequence(s, vocab);
        if (!report || s.count_masked(vocab) != 0) {
            throw ConfigError("support sequence " + std::to_string(i) + " is not a clean valid sequence: " +
                              report.message);
        }
        total += probs_[i];
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw ConfigError("distribution probabilities sum to " + std::to_string(total) + ", expected 1");
    }
    cumulative_.resize(probs_.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
        acc += probs_[i];
        cumulative_[i] = acc;
    }
}

std::optional<std::size_t> ToyJointDistribution::index_of(const std::vector<TokenId> & tokens) const {
    for (std::size_t i = 0; i < sequences_.size(); ++i) {
        if (sequences_[i] == tokens) {
            return i;
        }
    }
    return std::nullopt;
}

double ToyJointDistribution::probability_of(const std::vector<TokenId> & tokens) const {
    double p = 0.0;
    for (std::size_t i = 0; i < sequences_.size(); ++i) {
        if (sequences_[i] == tokens) {
            p += probs_[i];
        }
    }
    return p;
}

double ToyJointDistribution::nll(const std::vector<TokenId> & tokens) const {
    const double p = probability_of(tokens);
    return p > 0.0 ? -std::log(p) : std::numeric_limits<double>::infinity();
}

double ToyJointDistribution::entropy() const {
    double h = 0.0;
    for (double p : probs_) {
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

std::size_t ToyJointDistribution::sample_index(Rng & rng) const {
    const double u = rng.uniform() * cumulative_.back();
    auto it        = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) {
        --it;
    }
    return static_cast<std::size_t>(it - cumulative_.begin());
}

MaskedSequence ToyJointDistribution::sample(Rng & rng) const {
    return clean_sequence(sequences_[sample_index(rng)], layout_);
}

ToyJointDistribution uniform_distribution(LayoutPtr layout, std::vector<std::vector<TokenId>> sequences,
                                          const JointVocab & vocab) {
    const std::size_t n = sequences.size();
    if (n == 0) {
        throw ConfigError("uniform distribution over an empty set");
    }
    std::vector<double> probs(n, 1.0 / static_cast<double>(n));
    // Push the rounding residue into the last entry so the sum is exactly 1.
    double head = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        head += probs[i];
    }
    probs.back() = 1.0 - head;
    return ToyJointDistribution(std::move(layout), std::move(sequences), std::move(probs), vocab);
}

void suppress_invalid(DenoiserOutput & logits, const ModalityLayout & layout, const JointVocab & vocab) {
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const Modality m = layout.tag(i);
        auto row         = logits.row(i);
        for (TokenId v = 0; v < static_cast<TokenId>(row.size()); ++v) {
            if (v < vocab.range_begin(m) || v >= vocab.range_end(m)) {
                row[static_cast<std::size_t>(v)] = kSuppressedLogit;
            }
        }
    }
}

DenoiserOutput uniform_logits(const ModalityLayout & layout, const JointVocab & vocab) {
    DenoiserOutput out(layout.length(), static_cast<std::size_t>(vocab.total_size()), 0.0);
    suppress_invalid(out, layout, vocab);
    return out;
}

DenoiserOutput oracle_posterior(const ToyJointDistribution & dist, const MaskedSequence & x_t, const JointVocab & vocab) {
    const std::size_t len = x_t.tokens.size();
    if (len != dist.layout()->length()) {
        throw StructuralError("sequence length does not match the distribution layout");
    }
    const auto v = static_cast<std::size_t>(vocab.total_size());
    std::vector<double> mass(len * v, 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < dist.size(); ++s) {
        const auto & seq = dist.sequence(s);
        bool consistent  = true;
        for (std::size_t i = 0; i < len && consistent; ++i) {
            consistent = vocab.is_mask(x_t.tokens[i]) || x_t.tokens[i] == seq[i];
        }
        if (!consistent) {
            continue;
        }
        const double p = dist.probability(s);
        total += p;
        for (std::size_t i = 0; i < len; ++i) {
            mass[i * v + static_cast<std::size_t>(seq[i])] += p;
        }
    }
    if (!(total > 0.0)) {
        throw InconsistencyError("no support sequence is consistent with the visible tokens");
    }
    DenoiserOutput out(len, v, kSuppressedLogit);
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < v; ++j) {
            const double m = mass[i * v + j];
            if (m > 0.0) {
                out.at(i, j) = std::log(m / total);
            }
        }
    }
    return out;
}

OracleDenoiser::OracleDenoiser(std::shared_ptr<const ToyJointDistribution> dist, JointVocab vocab, OnInconsistent policy)
    : dist_(std::move(dist)), vocab_(vocab), policy_(policy) {
    if (!dist_) {
        throw ConfigError("oracle denoiser needs a distribution");
    }
}

DenoiserOutput OracleDenoiser::predict(const MaskedSequence & x_t) const {
    if (!x_t.layout || !(*x_t.layout == *dist_->layout())) {
        throw StructuralError("oracle called with a layout different from its distribution");
    }
    try {
        return oracle_posterior(*dist_, x_t, vocab_);
    } catch (const InconsistencyError &) {
        if (policy_ == OnInconsistent::Throw) {
            throw;
        }
        return uniform_logits(*x_t.layout, vocab_);
    }
}

DenoiserOutput OracleDenoiser::predict_cached(const MaskedSequence & x_t, ImageKvCache & cache, bool refresh) const {
    if (refresh) {
        cache.valid = true;
    }
    return predict(x_t);
}

} // namespace maskfuse
