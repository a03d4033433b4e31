#pragma once

#include "maskfuse/logits.hpp"
#include "maskfuse/rng.hpp"
#include "maskfuse/vocab.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace maskfuse {

using DenoiserOutput = Logits;

// Image-position keys/values retained between sampler refreshes. Layout of
// the payload is owned by the model that filled it.
struct ImageKvCache {
    bool valid = false;
    std::vector<std::vector<double>> keys;   // per layer
    std::vector<std::vector<double>> values; // per layer
    void clear() {
        valid = false;
        keys.clear();
        values.clear();
    }
};

// p_theta(x0 | x_t): logits for every position of a masked sequence.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual const JointVocab & vocab() const = 0;
    virtual DenoiserOutput predict(const MaskedSequence & x_t) const = 0;

    virtual bool supports_image_cache() const { return false; }

    // refresh = true runs a full pass and refills `cache`; otherwise only text
    // rows are computed against the cached image keys/values (image rows are
    // left at zero and must not be consumed).
    virtual DenoiserOutput predict_cached(const MaskedSequence & x_t, ImageKvCache & cache, bool refresh) const;
};

// Exact distribution over clean sequences sharing one layout.
class ToyJointDistribution {
public:
    ToyJointDistribution(LayoutPtr layout, std::vector<std::vector<TokenId>> sequences, std::vector<double> probs,
                         const JointVocab & vocab);

    const LayoutPtr & layout() const noexcept { return layout_; }
    std::size_t size() const noexcept { return sequences_.size(); }
    const std::vector<TokenId> & sequence(std::size_t i) const { return sequences_.at(i); }
    double probability(std::size_t i) const { return probs_.at(i); }
    const std::vector<double> & probabilities() const noexcept { return probs_; }

    // Probability of an arbitrary clean token vector (0 when outside the support).
    double probability_of(const std::vector<TokenId> & tokens) const;
    std::optional<std::size_t> index_of(const std::vector<TokenId> & tokens) const;

    // Exact -log p; +inf outside the support.
    double nll(const std::vector<TokenId> & tokens) const;
    // Expected NLL of a draw, i.e. the entropy.
    double entropy() const;

    std::size_t sample_index(Rng & rng) const;
    MaskedSequence sample(Rng & rng) const;

private:
    LayoutPtr layout_;
    std::vector<std::vector<TokenId>> sequences_;
    std::vector<double> probs_;
    std::vector<double> cumulative_;
};

// Builds a distribution uniform over the given sequences.
ToyJointDistribution uniform_distribution(LayoutPtr layout, std::vector<std::vector<TokenId>> sequences,
                                          const JointVocab & vocab);

// Logits = log p(x0_i = v | visible tokens of x_t), exact by enumeration.
// Zero-probability and cross-modality ids carry kSuppressedLogit.
// Throws InconsistencyError if no support sequence matches x_t.
DenoiserOutput oracle_posterior(const ToyJointDistribution & dist, const MaskedSequence & x_t, const JointVocab & vocab);

class OracleDenoiser : public Denoiser {
public:
    enum class OnInconsistent {
        Throw,
        // Uniform over the modality's clean ids. Used when scoring sequences
        // that may lie outside the support.
        Uniform,
    };

    OracleDenoiser(std::shared_ptr<const ToyJointDistribution> dist, JointVocab vocab,
                   OnInconsistent policy = OnInconsistent::Throw);

    const JointVocab & vocab() const override { return vocab_; }
    DenoiserOutput predict(const MaskedSequence & x_t) const override;

    // The posterior is exact, so a "cached" pass is just a full pass.
    bool supports_image_cache() const override { return true; }
    DenoiserOutput predict_cached(const MaskedSequence & x_t, ImageKvCache & cache, bool refresh) const override;

    const ToyJointDistribution & distribution() const noexcept { return *dist_; }

private:
    std::shared_ptr<const ToyJointDistribution> dist_;
    JointVocab vocab_;
    OnInconsistent policy_;
};

// Uniform logits over each position's clean ids.
DenoiserOutput uniform_logits(const ModalityLayout & layout, const JointVocab & vocab);

// Sets every id outside the position's clean range (mask included) to kSuppressedLogit.
void suppress_invalid(DenoiserOutput & logits, const ModalityLayout & layout, const JointVocab & vocab);

} // namespace maskfuse
