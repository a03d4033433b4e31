#pragma once

#include "maskfuse/denoiser.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace maskfuse {

enum class Attention : std::uint8_t { Bidirectional = 0, Causal = 1 };

struct ModelSpec {
    int n_layers       = 2;
    int n_heads        = 2;
    int d_model        = 32;
    int ffn_multiplier = 4;
    JointVocab vocab;
    LayoutPtr layout;

    bool qk_norm            = true;
    bool sandwich_norm      = true;
    bool zero_init_output   = true;
    bool rope               = true;
    bool modality_embedding = true;
    bool suppress_invalid   = true;
    // Output row i reports the raw prediction of row i - 1 (row 0 keeps its
    // own). Set on models fine-tuned from an AR checkpoint with shifted targets.
    bool shifted_output  = false;
    Attention attention  = Attention::Bidirectional;
    double rope_base     = 10000.0;

    int head_dim() const noexcept { return n_heads > 0 ? d_model / n_heads : 0; }
    int ffn_hidden() const noexcept { return ffn_multiplier * d_model; }

    // Throws ConfigError on invalid shapes.
    void validate() const;
};

struct TensorInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows   = 0;
    std::size_t cols   = 0;
    bool embedding     = false; // lookup table, excluded from non-embedding counts
    bool decay         = false; // receives decoupled weight decay

    std::size_t size() const noexcept { return rows * cols; }
};

// Parameter tensors of a spec in declaration order.
std::vector<TensorInfo> enumerate_tensors(const ModelSpec & spec);

struct LayerTape {
    std::vector<double> h_in, attn_r, a, q, k, v, q_inv, k_inv, q_hat, k_hat, q_rot, k_rot, probs, o;
    std::vector<double> h_mid, ffn_r, f, u, g, y, post_r;
};

// Activations of one full forward pass, consumed by Transformer::backward.
struct ForwardTape {
    std::vector<TokenId> tokens;
    LayoutPtr layout;
    std::vector<LayerTape> layers;
    std::vector<double> h_final, final_r, z;
};

// Bidirectional (or causal) decoder-only transformer over the joint vocabulary.
// The timestep is not an input: the mask pattern carries the corruption level.
class Transformer : public Denoiser {
public:
    Transformer(ModelSpec spec, std::uint64_t seed);

    const ModelSpec & spec() const noexcept { return spec_; }
    const JointVocab & vocab() const override { return spec_.vocab; }

    const std::vector<TensorInfo> & tensors() const noexcept { return tensors_; }
    std::span<double> parameters() noexcept { return params_; }
    std::span<const double> parameters() const noexcept { return params_; }
    std::size_t parameter_count() const noexcept { return params_.size(); }
    const TensorInfo & tensor(const std::string & name) const;

    // Suppressed, shifted (if flagged) logits for a masked sequence.
    DenoiserOutput predict(const MaskedSequence & x_t) const override;

    bool supports_image_cache() const override { return spec_.attention == Attention::Bidirectional; }
    DenoiserOutput predict_cached(const MaskedSequence & x_t, ImageKvCache & cache, bool refresh) const override;

    // Raw logits (no suppression, no shift). `tape` records activations for backward.
    Logits forward(const std::vector<TokenId> & tokens, const ModalityLayout & layout, ForwardTape * tape = nullptr) const;

    // Accumulates d loss / d params into `grad` given d loss / d raw logits.
    void backward(const ForwardTape & tape, const Logits & dlogits, std::span<double> grad) const;

    // Normalized query/key rows (per head, before rotation) of one layer; for tests.
    std::pair<std::vector<double>, std::vector<double>> normalized_qk(const std::vector<TokenId> & tokens,
                                                                      const ModalityLayout & layout, int layer) const;

    void save(const std::filesystem::path & path) const;
    // Throws FormatError on malformed files.
    static Transformer load(const std::filesystem::path & path);
    // Loads parameters into this model; the file spec must match in shape.
    void load_parameters(const std::filesystem::path & path);

private:
    struct LayerOffsets {
        std::size_t attn_norm, wq, wk, wv, wo, qk_gain, ffn_norm, w1, b1, w2, b2, ffn_post;
    };

    void check_layout(const ModalityLayout & layout) const;
    void rope_angles(const ModalityLayout & layout, std::vector<double> & cos_t, std::vector<double> & sin_t) const;
    Logits run(const std::vector<TokenId> & tokens, const ModalityLayout & layout, ForwardTape * tape,
               const ImageKvCache * cached, ImageKvCache * fill) const;
    DenoiserOutput finish(Logits raw, const ModalityLayout & layout) const;

    ModelSpec spec_;
    std::vector<TensorInfo> tensors_;
    std::vector<double> params_;
    std::size_t tok_emb_ = 0, mod_emb_ = 0, final_norm_ = 0, w_out_ = 0, b_out_ = 0;
    std::vector<LayerOffsets> layers_;
};

// Causal model next-token logits: row i is the prediction of x[i] from x[<i].
// The input is shifted right with the mask id acting as the start token.
Logits ar_predict(const Transformer & model, const MaskedSequence & x);

// Input used by ar_predict: [mask, x0, ..., x_{L-2}].
std::vector<TokenId> ar_shift_input(const std::vector<TokenId> & x, const JointVocab & vocab);

// Left-shifted diffusion targets: entry i is x0[i+1] when x_t[i+1] is masked,
// otherwise -1 (unsupervised). The last entry is always -1.
std::vector<TokenId> shift_targets_for_finetune(const std::vector<TokenId> & x0, const std::vector<TokenId> & x_t,
                                                const JointVocab & vocab);

} // namespace maskfuse
