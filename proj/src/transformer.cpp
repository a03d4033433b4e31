#include "maskfuse/transformer.hpp"

#include "maskfuse/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace maskfuse {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kQkEps   = 1e-12;

double gelu(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2 / pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double inner = c * (x + 0.044715 * x * x * x);
    const double th    = std::tanh(inner);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

// y = x * r * gain with r = 1 / sqrt(mean(x^2) + eps); returns r.
double rmsnorm_row(const double * x, const double * gain, double * y, int n) {
    double ss = 0.0;
    for (int k = 0; k < n; ++k) {
        ss += x[k] * x[k];
    }
    const double r = 1.0 / std::sqrt(ss / n + kNormEps);
    for (int k = 0; k < n; ++k) {
        y[k] = x[k] * r * gain[k];
    }
    return r;
}

void rmsnorm_row_backward(const double * x, const double * gain, double r, const double * dy, double * dx, double * dgain,
                          int n) {
    double dot = 0.0;
    for (int k = 0; k < n; ++k) {
        dgain[k] += dy[k] * x[k] * r;
        dot += dy[k] * gain[k] * x[k];
    }
    const double c = r * r * r * dot / n;
    for (int k = 0; k < n; ++k) {
        dx[k] += r * gain[k] * dy[k] - c * x[k];
    }
}

// out[j] = sum_k in[k] W[k, j] (+ bias[j])
void matvec(const double * in, const double * w, const double * bias, double * out, int n_in, int n_out) {
    for (int j = 0; j < n_out; ++j) {
        out[j] = bias ? bias[j] : 0.0;
    }
    for (int k = 0; k < n_in; ++k) {
        const double a    = in[k];
        const double * wr = w + static_cast<std::size_t>(k) * n_out;
        for (int j = 0; j < n_out; ++j) {
            out[j] += a * wr[j];
        }
    }
}

// Accumulates dW += in^T dout, din += W dout.
void matvec_backward(const double * in, const double * w, const double * dout, double * din, double * dw, int n_in,
                     int n_out) {
    for (int k = 0; k < n_in; ++k) {
        const double * wr = w + static_cast<std::size_t>(k) * n_out;
        double * dwr      = dw + static_cast<std::size_t>(k) * n_out;
        double acc        = 0.0;
        for (int j = 0; j < n_out; ++j) {
            dwr[j] += in[k] * dout[j];
            acc += wr[j] * dout[j];
        }
        if (din) {
            din[k] += acc;
        }
    }
}

double normal(Rng & rng) {
    const double u1 = std::max(rng.uniform(), 1e-300);
    const double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void write_u8(std::ostream & os, std::uint8_t v) { os.put(static_cast<char>(v)); }

void write_u32(std::ostream & os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

void write_u64(std::ostream & os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

class Reader {
public:
    explicit Reader(std::istream & is) : is_(is) {}

    std::uint8_t u8() {
        char c = 0;
        if (!is_.get(c)) {
            throw FormatError(FormatErrorKind::Truncated, "checkpoint truncated");
        }
        return static_cast<std::uint8_t>(c);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        }
        return v;
    }

private:
    std::istream & is_;
};

constexpr char kCheckpointMagic[5] = {'M', 'F', 'U', 'S', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

enum SpecFlag : std::uint32_t {
    kFlagQkNorm       = 1U << 0,
    kFlagSandwich     = 1U << 1,
    kFlagZeroInit     = 1U << 2,
    kFlagRope         = 1U << 3,
    kFlagModalityEmb  = 1U << 4,
    kFlagSuppress     = 1U << 5,
    kFlagShiftedOut   = 1U << 6,
};

struct FileSpec {
    ModelSpec spec;
    std::uint64_t param_count = 0;
};

FileSpec read_header(std::istream & is) {
    char magic[5] = {};
    if (!is.read(magic, 5)) {
        throw FormatError(FormatErrorKind::Truncated, "checkpoint shorter than its magic");
    }
    if (std::memcmp(magic, kCheckpointMagic, 5) != 0) {
        throw FormatError(FormatErrorKind::MagicMismatch, "not a checkpoint (magic mismatch)");
    }
    Reader r(is);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(FormatErrorKind::VersionMismatch, "unsupported checkpoint version " + std::to_string(version));
    }
    FileSpec fs;
    ModelSpec & s      = fs.spec;
    s.n_layers         = static_cast<int>(r.u32());
    s.n_heads          = static_cast<int>(r.u32());
    s.d_model          = static_cast<int>(r.u32());
    s.ffn_multiplier   = static_cast<int>(r.u32());
    const auto text    = static_cast<std::int32_t>(r.u32());
    const auto image   = static_cast<std::int32_t>(r.u32());
    const auto rows    = static_cast<int>(r.u32());
    const auto cols    = static_cast<int>(r.u32());
    const auto tlen    = static_cast<int>(r.u32());
    const bool img_1st = r.u8() != 0;
    s.attention        = r.u8() == 0 ? Attention::Bidirectional : Attention::Causal;
    const std::uint32_t flags = r.u32();
    s.rope_base               = std::bit_cast<double>(r.u64());
    fs.param_count            = r.u64();
    s.qk_norm                 = (flags & kFlagQkNorm) != 0;
    s.sandwich_norm           = (flags & kFlagSandwich) != 0;
    s.zero_init_output        = (flags & kFlagZeroInit) != 0;
    s.rope                    = (flags & kFlagRope) != 0;
    s.modality_embedding      = (flags & kFlagModalityEmb) != 0;
    s.suppress_invalid        = (flags & kFlagSuppress) != 0;
    s.shifted_output          = (flags & kFlagShiftedOut) != 0;
    try {
        s.vocab  = build_vocab(text, image);
        s.layout = make_layout(ModalityLayout::blocks(rows, cols, tlen, img_1st));
        s.validate();
    } catch (const ConfigError & e) {
        throw FormatError(FormatErrorKind::InvalidContent, std::string("checkpoint spec invalid: ") + e.what());
    }
    return fs;
}

void read_parameters(std::istream & is, std::span<double> out) {
    Reader r(is);
    for (double & p : out) {
        p = static_cast<double>(std::bit_cast<float>(r.u32()));
    }
}

} // namespace

void ModelSpec::validate() const {
    if (n_layers < 0 || n_heads < 1 || d_model < 1 || ffn_multiplier < 1) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) {
        throw ConfigError("head dimension must be even for rotary embeddings");
    }
    if (!layout) {
        throw ConfigError("model spec needs a layout");
    }
    if (rope && layout->count(Modality::Image) > 0 && head_dim() % 4 != 0) {
        throw ConfigError("2D rotary embeddings need a head dimension divisible by 4");
    }
    if (vocab.text_size < 1 || vocab.image_size < 1) {
        throw ConfigError("model spec needs a vocab");
    }
}

std::vector<TensorInfo> enumerate_tensors(const ModelSpec & spec) {
    spec.validate();
    const auto d = static_cast<std::size_t>(spec.d_model);
    const auto v = static_cast<std::size_t>(spec.vocab.total_size());
    const auto f = static_cast<std::size_t>(spec.ffn_hidden());
    std::vector<TensorInfo> out;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::size_t rows, std::size_t cols, bool embedding, bool decay) {
        out.push_back(TensorInfo{std::move(name), offset, rows, cols, embedding, decay});
        offset += rows * cols;
    };
    add("tok_emb", v, d, true, false);
    if (spec.modality_embedding) {
        add("mod_emb", 2, d, true, false);
    }
    for (int l = 0; l < spec.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        add(p + "attn_norm", 1, d, false, false);
        add(p + "wq", d, d, false, true);
        add(p + "wk", d, d, false, true);
        add(p + "wv", d, d, false, true);
        add(p + "wo", d, d, false, true);
        if (spec.qk_norm) {
            add(p + "qk_gain", 1, 1, false, false);
        }
        add(p + "ffn_norm", 1, d, false, false);
        add(p + "w1", d, f, false, true);
        add(p + "b1", 1, f, false, false);
        add(p + "w2", f, d, false, true);
        add(p + "b2", 1, d, false, false);
        if (spec.sandwich_norm) {
            add(p + "ffn_post_norm", 1, d, false, false);
        }
    }
    add("final_norm", 1, d, false, false);
    add("w_out", d, v, false, true);
    add("b_out", 1, v, false, false);
    return out;
}

Transformer::Transformer(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    tensors_ = enumerate_tensors(spec_);
    params_.assign(tensors_.back().offset + tensors_.back().size(), 0.0);

    auto off = [&](const std::string & name) { return tensor(name).offset; };
    tok_emb_ = off("tok_emb");
    mod_emb_ = spec_.modality_embedding ? off("mod_emb") : 0;
    for (int l = 0; l < spec_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerOffsets lo{};
        lo.attn_norm = off(p + "attn_norm");
        lo.wq        = off(p + "wq");
        lo.wk        = off(p + "wk");
        lo.wv        = off(p + "wv");
        lo.wo        = off(p + "wo");
        lo.qk_gain   = spec_.qk_norm ? off(p + "qk_gain") : 0;
        lo.ffn_norm  = off(p + "ffn_norm");
        lo.w1        = off(p + "w1");
        lo.b1        = off(p + "b1");
        lo.w2        = off(p + "w2");
        lo.b2        = off(p + "b2");
        lo.ffn_post  = spec_.sandwich_norm ? off(p + "ffn_post_norm") : 0;
        layers_.push_back(lo);
    }
    final_norm_ = off("final_norm");
    w_out_      = off("w_out");
    b_out_      = off("b_out");

    Rng rng = Rng(seed).substream("init");
    const double residual_scale = 1.0 / std::sqrt(2.0 * std::max(1, spec_.n_layers));
    for (const auto & t : tensors_) {
        auto span = std::span<double>(params_).subspan(t.offset, t.size());
        const bool is_gain = t.name.ends_with("norm");
        if (is_gain) {
            std::fill(span.begin(), span.end(), 1.0);
        } else if (t.name.ends_with("qk_gain")) {
            span[0] = std::sqrt(static_cast<double>(spec_.head_dim()));
        } else if (t.embedding) {
            for (double & x : span) {
                x = normal(rng);
            }
        } else if (t.decay) {
            double std_dev = 1.0 / std::sqrt(static_cast<double>(t.rows));
            if (t.name.ends_with("wo") || t.name.ends_with("w2")) {
                std_dev *= residual_scale;
            }
            if (t.name == "w_out" && spec_.zero_init_output) {
                std_dev = 0.0;
            }
            for (double & x : span) {
                x = std_dev * normal(rng);
            }
        }
        // biases stay zero
    }
}

const TensorInfo & Transformer::tensor(const std::string & name) const {
    for (const auto & t : tensors_) {
        if (t.name == name) {
            return t;
        }
    }
    throw ConfigError("no tensor named '" + name + "'");
}

void Transformer::check_layout(const ModalityLayout & layout) const {
    if (!layout.same_shape(*spec_.layout)) {
        throw StructuralError("sequence layout does not match the model layout");
    }
}

void Transformer::rope_angles(const ModalityLayout & layout, std::vector<double> & cos_t, std::vector<double> & sin_t) const {
    const std::size_t len  = layout.length();
    const int hd           = spec_.head_dim();
    const int pairs        = hd / 2;
    cos_t.assign(len * static_cast<std::size_t>(pairs), 1.0);
    sin_t.assign(len * static_cast<std::size_t>(pairs), 0.0);
    if (!spec_.rope) {
        return;
    }
    for (std::size_t i = 0; i < len; ++i) {
        for (int p = 0; p < pairs; ++p) {
            double angle = 0.0;
            if (layout.tag(i) == Modality::Text) {
                const double freq = std::pow(spec_.rope_base, -2.0 * p / hd);
                angle             = static_cast<double>(layout.modality_index(i)) * freq;
            } else {
                // First half of each head rotates with the grid row, second half with the column.
                const int quarter = hd / 4;
                const int local   = p < quarter ? p : p - quarter;
                const double freq = std::pow(spec_.rope_base, -2.0 * local / (hd / 2));
                const int coord   = p < quarter ? layout.grid_row(i) : layout.grid_col(i);
                angle             = coord * freq;
            }
            cos_t[i * pairs + p] = std::cos(angle);
            sin_t[i * pairs + p] = std::sin(angle);
        }
    }
}

Logits Transformer::run(const std::vector<TokenId> & tokens, const ModalityLayout & layout, ForwardTape * tape,
                        const ImageKvCache * cached, ImageKvCache * fill) const {
    check_layout(layout);
    const std::size_t len = tokens.size();
    if (len != layout.length()) {
        throw StructuralError("token count does not match layout length");
    }
    const int V = spec_.vocab.total_size();
    for (TokenId t : tokens) {
        if (t < 0 || t >= V) {
            throw StructuralError("token id " + std::to_string(t) + " outside the joint vocab");
        }
    }
    const int d  = spec_.d_model;
    const int H  = spec_.n_heads;
    const int hd = spec_.head_dim();
    const int F  = spec_.ffn_hidden();
    const int pairs = hd / 2;
    const bool causal = spec_.attention == Attention::Causal;
    const double * P  = params_.data();

    std::vector<char> active(len, 1);
    if (cached) {
        for (std::size_t i = 0; i < len; ++i) {
            active[i] = layout.tag(i) == Modality::Text ? 1 : 0;
        }
    }

    std::vector<double> cos_t, sin_t;
    rope_angles(layout, cos_t, sin_t);

    const std::size_t Ld = len * static_cast<std::size_t>(d);
    std::vector<double> h(Ld, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        if (!active[i]) {
            continue;
        }
        const double * e = P + tok_emb_ + static_cast<std::size_t>(tokens[i]) * d;
        for (int k = 0; k < d; ++k) {
            h[i * d + k] = e[k];
        }
        if (spec_.modality_embedding) {
            const double * me = P + mod_emb_ + static_cast<std::size_t>(layout.tag(i)) * d;
            for (int k = 0; k < d; ++k) {
                h[i * d + k] += me[k];
            }
        }
    }

    if (tape) {
        tape->tokens = tokens;
        tape->layout = std::make_shared<const ModalityLayout>(layout);
        tape->layers.assign(static_cast<std::size_t>(spec_.n_layers), LayerTape{});
    }
    if (fill) {
        fill->keys.assign(static_cast<std::size_t>(spec_.n_layers), {});
        fill->values.assign(static_cast<std::size_t>(spec_.n_layers), {});
    }

    std::vector<double> a(Ld), q(Ld), k(Ld), v(Ld), q_hat(Ld), k_hat(Ld), q_rot(Ld), k_rot(Ld), o(Ld), h_mid(Ld);
    std::vector<double> q_inv(len * H, 1.0), k_inv(len * H, 1.0), attn_r(len, 0.0), ffn_r(len, 0.0), post_r(len, 0.0);
    std::vector<double> f(Ld), y(Ld), u(len * static_cast<std::size_t>(F)), g(len * static_cast<std::size_t>(F));
    std::vector<double> probs(static_cast<std::size_t>(H) * len * len, 0.0);
    std::vector<double> scores(len);

    for (int l = 0; l < spec_.n_layers; ++l) {
        const LayerOffsets & lo = layers_[static_cast<std::size_t>(l)];
        if (tape) {
            tape->layers[static_cast<std::size_t>(l)].h_in = h;
        }
        for (std::size_t i = 0; i < len; ++i) {
            if (!active[i]) {
                continue;
            }
            attn_r[i] = rmsnorm_row(&h[i * d], P + lo.attn_norm, &a[i * d], d);
            matvec(&a[i * d], P + lo.wq, nullptr, &q[i * d], d, d);
            matvec(&a[i * d], P + lo.wk, nullptr, &k[i * d], d, d);
            matvec(&a[i * d], P + lo.wv, nullptr, &v[i * d], d, d);
            for (int hh = 0; hh < H; ++hh) {
                const std::size_t base = i * d + static_cast<std::size_t>(hh) * hd;
                if (spec_.qk_norm) {
                    double qs = 0.0, ks = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        qs += q[base + c] * q[base + c];
                        ks += k[base + c] * k[base + c];
                    }
                    q_inv[i * H + hh] = 1.0 / std::sqrt(qs + kQkEps);
                    k_inv[i * H + hh] = 1.0 / std::sqrt(ks + kQkEps);
                }
                for (int c = 0; c < hd; ++c) {
                    q_hat[base + c] = q[base + c] * q_inv[i * H + hh];
                    k_hat[base + c] = k[base + c] * k_inv[i * H + hh];
                }
                for (int p = 0; p < pairs; ++p) {
                    const double cs = cos_t[i * pairs + p];
                    const double sn = sin_t[i * pairs + p];
                    const std::size_t e0 = base + 2 * p, e1 = e0 + 1;
                    q_rot[e0] = q_hat[e0] * cs - q_hat[e1] * sn;
                    q_rot[e1] = q_hat[e0] * sn + q_hat[e1] * cs;
                    k_rot[e0] = k_hat[e0] * cs - k_hat[e1] * sn;
                    k_rot[e1] = k_hat[e0] * sn + k_hat[e1] * cs;
                }
            }
        }
        if (cached) {
            const auto & ck = cached->keys.at(static_cast<std::size_t>(l));
            const auto & cv = cached->values.at(static_cast<std::size_t>(l));
            for (std::size_t i = 0; i < len; ++i) {
                if (!active[i]) {
                    std::copy_n(ck.begin() + static_cast<std::ptrdiff_t>(i * d), d, k_rot.begin() + static_cast<std::ptrdiff_t>(i * d));
                    std::copy_n(cv.begin() + static_cast<std::ptrdiff_t>(i * d), d, v.begin() + static_cast<std::ptrdiff_t>(i * d));
                }
            }
        }
        if (fill) {
            fill->keys[static_cast<std::size_t>(l)]   = k_rot;
            fill->values[static_cast<std::size_t>(l)] = v;
        }

        const double scale = spec_.qk_norm ? P[lo.qk_gain] : 1.0 / std::sqrt(static_cast<double>(hd));
        for (std::size_t i = 0; i < len; ++i) {
            if (!active[i]) {
                continue;
            }
            const std::size_t n_keys = causal ? i + 1 : len;
            for (int hh = 0; hh < H; ++hh) {
                const std::size_t hoff = static_cast<std::size_t>(hh) * hd;
                double mx              = -1e300;
                for (std::size_t j = 0; j < n_keys; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        s += q_rot[i * d + hoff + c] * k_rot[j * d + hoff + c];
                    }
                    scores[j] = s * scale;
                    mx        = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < n_keys; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                double * prow = &probs[(static_cast<std::size_t>(hh) * len + i) * len];
                for (std::size_t j = 0; j < len; ++j) {
                    prow[j] = j < n_keys ? scores[j] / z : 0.0;
                }
                for (int c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n_keys; ++j) {
                        acc += prow[j] * v[j * d + hoff + c];
                    }
                    o[i * d + hoff + c] = acc;
                }
            }
            matvec(&o[i * d], P + lo.wo, nullptr, &h_mid[i * d], d, d);
            for (int c = 0; c < d; ++c) {
                h_mid[i * d + c] += h[i * d + c];
            }
            ffn_r[i] = rmsnorm_row(&h_mid[i * d], P + lo.ffn_norm, &f[i * d], d);
            matvec(&f[i * d], P + lo.w1, P + lo.b1, &u[i * F], d, F);
            for (int c = 0; c < F; ++c) {
                g[i * F + c] = gelu(u[i * F + c]);
            }
            matvec(&g[i * F], P + lo.w2, P + lo.b2, &y[i * d], F, d);
            if (spec_.sandwich_norm) {
                std::vector<double> yn(static_cast<std::size_t>(d));
                post_r[i] = rmsnorm_row(&y[i * d], P + lo.ffn_post, yn.data(), d);
                for (int c = 0; c < d; ++c) {
                    h[i * d + c] = h_mid[i * d + c] + yn[static_cast<std::size_t>(c)];
                }
            } else {
                for (int c = 0; c < d; ++c) {
                    h[i * d + c] = h_mid[i * d + c] + y[i * d + c];
                }
            }
        }
        if (tape) {
            LayerTape & lt = tape->layers[static_cast<std::size_t>(l)];
            lt.attn_r = attn_r;
            lt.a      = a;
            lt.q      = q;
            lt.k      = k;
            lt.v      = v;
            lt.q_inv  = q_inv;
            lt.k_inv  = k_inv;
            lt.q_hat  = q_hat;
            lt.k_hat  = k_hat;
            lt.q_rot  = q_rot;
            lt.k_rot  = k_rot;
            lt.probs  = probs;
            lt.o      = o;
            lt.h_mid  = h_mid;
            lt.ffn_r  = ffn_r;
            lt.f      = f;
            lt.u      = u;
            lt.g      = g;
            lt.y      = y;
            lt.post_r = post_r;
        }
    }

    Logits logits(len, static_cast<std::size_t>(V), 0.0);
    std::vector<double> z(Ld, 0.0), final_r(len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        if (!active[i]) {
            continue;
        }
        final_r[i] = rmsnorm_row(&h[i * d], P + final_norm_, &z[i * d], d);
        matvec(&z[i * d], P + w_out_, P + b_out_, logits.row(i).data(), d, V);
    }
    if (tape) {
        tape->h_final = h;
        tape->final_r = final_r;
        tape->z       = z;
    }
    if (fill) {
        fill->valid = true;
    }
    return logits;
}

Logits Transformer::forward(const std::vector<TokenId> & tokens, const ModalityLayout & layout, ForwardTape * tape) const {
    return run(tokens, layout, tape, nullptr, nullptr);
}

DenoiserOutput Transformer::finish(Logits raw, const ModalityLayout & layout) const {
    if (spec_.shifted_output) {
        for (std::size_t i = raw.rows(); i-- > 1;) {
            auto dst = raw.row(i);
            auto src = raw.row(i - 1);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }
    if (spec_.suppress_invalid) {
        suppress_invalid(raw, layout, spec_.vocab);
    }
    return raw;
}

DenoiserOutput Transformer::predict(const MaskedSequence & x_t) const {
    if (!x_t.layout) {
        throw StructuralError("sequence has no layout");
    }
    return finish(forward(x_t.tokens, *x_t.layout), *x_t.layout);
}

DenoiserOutput Transformer::predict_cached(const MaskedSequence & x_t, ImageKvCache & cache, bool refresh) const {
    if (!supports_image_cache()) {
        throw CapabilityError("image key/value caching needs a bidirectional model");
    }
    if (spec_.shifted_output) {
        throw CapabilityError("image key/value caching is not defined for shifted-output models");
    }
    if (refresh || !cache.valid) {
        return finish(run(x_t.tokens, *x_t.layout, nullptr, nullptr, &cache), *x_t.layout);
    }
    return finish(run(x_t.tokens, *x_t.layout, nullptr, &cache, nullptr), *x_t.layout);
}

void Transformer::backward(const ForwardTape & tape, const Logits & dlogits, std::span<double> grad) const {
    if (grad.size() != params_.size()) {
        throw StructuralError("gradient buffer size does not match parameter count");
    }
    const std::size_t len = tape.tokens.size();
    const int d  = spec_.d_model;
    const int H  = spec_.n_heads;
    const int hd = spec_.head_dim();
    const int F  = spec_.ffn_hidden();
    const int V  = spec_.vocab.total_size();
    const int pairs   = hd / 2;
    const bool causal = spec_.attention == Attention::Causal;
    const double * P  = params_.data();
    double * G        = grad.data();
    const std::size_t Ld = len * static_cast<std::size_t>(d);

    // Layout is needed again for rope and modality ids.
    const ModalityLayout & layout = tape.layout ? *tape.layout : *spec_.layout;
    std::vector<double> cos_t, sin_t;
    rope_angles(layout, cos_t, sin_t);

    std::vector<double> dh(Ld, 0.0), dz(Ld, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        auto drow = dlogits.row(i);
        for (int j = 0; j < V; ++j) {
            G[b_out_ + j] += drow[static_cast<std::size_t>(j)];
        }
        matvec_backward(&tape.z[i * d], P + w_out_, drow.data(), &dz[i * d], G + w_out_, d, V);
        rmsnorm_row_backward(&tape.h_final[i * d], P + final_norm_, tape.final_r[i], &dz[i * d], &dh[i * d], G + final_norm_, d);
    }

    std::vector<double> dh_mid(Ld), dy(Ld), df(Ld), dg(len * F), du(len * F), d_o(Ld), dv(Ld), dq_rot(Ld), dk_rot(Ld);
    std::vector<double> dq(Ld), dk(Ld), da(Ld), dprob(len);
    for (int l = spec_.n_layers - 1; l >= 0; --l) {
        const LayerOffsets & lo = layers_[static_cast<std::size_t>(l)];
        const LayerTape & lt    = tape.layers[static_cast<std::size_t>(l)];
        std::fill(dh_mid.begin(), dh_mid.end(), 0.0);
        std::fill(dy.begin(), dy.end(), 0.0);
        std::fill(df.begin(), df.end(), 0.0);
        std::fill(dg.begin(), dg.end(), 0.0);
        std::fill(d_o.begin(), d_o.end(), 0.0);

        for (std::size_t i = 0; i < len; ++i) {
            for (int c = 0; c < d; ++c) {
                dh_mid[i * d + c] = dh[i * d + c];
            }
            if (spec_.sandwich_norm) {
                rmsnorm_row_backward(&lt.y[i * d], P + lo.ffn_post, lt.post_r[i], &dh[i * d], &dy[i * d], G + lo.ffn_post, d);
            } else {
                for (int c = 0; c < d; ++c) {
                    dy[i * d + c] = dh[i * d + c];
                }
            }
            for (int c = 0; c < d; ++c) {
                G[lo.b2 + c] += dy[i * d + c];
            }
            matvec_backward(&lt.g[i * F], P + lo.w2, &dy[i * d], &dg[i * F], G + lo.w2, F, d);
            for (int c = 0; c < F; ++c) {
                du[i * F + c] = dg[i * F + c] * gelu_grad(lt.u[i * F + c]);
                G[lo.b1 + c] += du[i * F + c];
            }
            matvec_backward(&lt.f[i * d], P + lo.w1, &du[i * F], &df[i * d], G + lo.w1, d, F);
            rmsnorm_row_backward(&lt.h_mid[i * d], P + lo.ffn_norm, lt.ffn_r[i], &df[i * d], &dh_mid[i * d], G + lo.ffn_norm, d);
            // h_mid = h_in + o Wo
            matvec_backward(&lt.o[i * d], P + lo.wo, &dh_mid[i * d], &d_o[i * d], G + lo.wo, d, d);
        }

        // Attention.
        std::fill(dv.begin(), dv.end(), 0.0);
        std::fill(dq_rot.begin(), dq_rot.end(), 0.0);
        std::fill(dk_rot.begin(), dk_rot.end(), 0.0);
        const double scale = spec_.qk_norm ? P[lo.qk_gain] : 1.0 / std::sqrt(static_cast<double>(hd));
        double dscale      = 0.0;
        for (int hh = 0; hh < H; ++hh) {
            const std::size_t hoff = static_cast<std::size_t>(hh) * hd;
            for (std::size_t i = 0; i < len; ++i) {
                const std::size_t n_keys = causal ? i + 1 : len;
                const double * prow      = &lt.probs[(static_cast<std::size_t>(hh) * len + i) * len];
                double mean              = 0.0;
                for (std::size_t j = 0; j < n_keys; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        s += d_o[i * d + hoff + c] * lt.v[j * d + hoff + c];
                        dv[j * d + hoff + c] += prow[j] * d_o[i * d + hoff + c];
                    }
                    dprob[j] = s;
                    mean += prow[j] * s;
                }
                for (std::size_t j = 0; j < n_keys; ++j) {
                    const double ds = prow[j] * (dprob[j] - mean);
                    if (ds == 0.0) {
                        continue;
                    }
                    double qk = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        qk += lt.q_rot[i * d + hoff + c] * lt.k_rot[j * d + hoff + c];
                        dq_rot[i * d + hoff + c] += scale * ds * lt.k_rot[j * d + hoff + c];
                        dk_rot[j * d + hoff + c] += scale * ds * lt.q_rot[i * d + hoff + c];
                    }
                    dscale += ds * qk;
                }
            }
        }
        if (spec_.qk_norm) {
            G[lo.qk_gain] += dscale;
        }

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(da.begin(), da.end(), 0.0);
        std::vector<double> dqh(static_cast<std::size_t>(hd)), dkh(static_cast<std::size_t>(hd));
        for (std::size_t i = 0; i < len; ++i) {
            for (int hh = 0; hh < H; ++hh) {
                const std::size_t base = i * d + static_cast<std::size_t>(hh) * hd;
                for (int p = 0; p < pairs; ++p) {
                    const double cs = cos_t[i * pairs + p];
                    const double sn = sin_t[i * pairs + p];
                    const std::size_t e0 = base + 2 * p, e1 = e0 + 1;
                    dqh[2 * p]     = dq_rot[e0] * cs + dq_rot[e1] * sn;
                    dqh[2 * p + 1] = -dq_rot[e0] * sn + dq_rot[e1] * cs;
                    dkh[2 * p]     = dk_rot[e0] * cs + dk_rot[e1] * sn;
                    dkh[2 * p + 1] = -dk_rot[e0] * sn + dk_rot[e1] * cs;
                }
                if (spec_.qk_norm) {
                    const double qi = lt.q_inv[i * H + hh];
                    const double ki = lt.k_inv[i * H + hh];
                    double qdot = 0.0, kdot = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        qdot += lt.q[base + c] * dqh[static_cast<std::size_t>(c)];
                        kdot += lt.k[base + c] * dkh[static_cast<std::size_t>(c)];
                    }
                    for (int c = 0; c < hd; ++c) {
                        dq[base + c] = qi * dqh[static_cast<std::size_t>(c)] - qi * qi * qi * lt.q[base + c] * qdot;
                        dk[base + c] = ki * dkh[static_cast<std::size_t>(c)] - ki * ki * ki * lt.k[base + c] * kdot;
                    }
                } else {
                    for (int c = 0; c < hd; ++c) {
                        dq[base + c] = dqh[static_cast<std::size_t>(c)];
                        dk[base + c] = dkh[static_cast<std::size_t>(c)];
                    }
                }
            }
            matvec_backward(&lt.a[i * d], P + lo.wq, &dq[i * d], &da[i * d], G + lo.wq, d, d);
            matvec_backward(&lt.a[i * d], P + lo.wk, &dk[i * d], &da[i * d], G + lo.wk, d, d);
            matvec_backward(&lt.a[i * d], P + lo.wv, &dv[i * d], &da[i * d], G + lo.wv, d, d);
            for (int c = 0; c < d; ++c) {
                dh[i * d + c] = dh_mid[i * d + c];
            }
            rmsnorm_row_backward(&lt.h_in[i * d], P + lo.attn_norm, lt.attn_r[i], &da[i * d], &dh[i * d], G + lo.attn_norm, d);
        }
    }

    for (std::size_t i = 0; i < len; ++i) {
        double * ge = G + tok_emb_ + static_cast<std::size_t>(tape.tokens[i]) * d;
        for (int c = 0; c < d; ++c) {
            ge[c] += dh[i * d + c];
        }
        if (spec_.modality_embedding) {
            double * gm = G + mod_emb_ + static_cast<std::size_t>(layout.tag(i)) * d;
            for (int c = 0; c < d; ++c) {
                gm[c] += dh[i * d + c];
            }
        }
    }
}

std::pair<std::vector<double>, std::vector<double>> Transformer::normalized_qk(const std::vector<TokenId> & tokens,
                                                                               const ModalityLayout & layout,
                                                                               int layer) const {
    ForwardTape tape;
    run(tokens, layout, &tape, nullptr, nullptr);
    const auto & lt = tape.layers.at(static_cast<std::size_t>(layer));
    return {lt.q_hat, lt.k_hat};
}

void Transformer::save(const std::filesystem::path & path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
    }
    os.write(kCheckpointMagic, 5);
    write_u32(os, kCheckpointVersion);
    const ModelSpec & s = spec_;
    write_u32(os, static_cast<std::uint32_t>(s.n_layers));
    write_u32(os, static_cast<std::uint32_t>(s.n_heads));
    write_u32(os, static_cast<std::uint32_t>(s.d_model));
    write_u32(os, static_cast<std::uint32_t>(s.ffn_multiplier));
    write_u32(os, static_cast<std::uint32_t>(s.vocab.text_size));
    write_u32(os, static_cast<std::uint32_t>(s.vocab.image_size));
    write_u32(os, static_cast<std::uint32_t>(s.layout->image_rows()));
    write_u32(os, static_cast<std::uint32_t>(s.layout->image_cols()));
    write_u32(os, static_cast<std::uint32_t>(s.layout->count(Modality::Text)));
    write_u8(os, s.layout->image_first() ? 1 : 0);
    write_u8(os, static_cast<std::uint8_t>(s.attention));
    std::uint32_t flags = 0;
    flags |= s.qk_norm ? kFlagQkNorm : 0U;
    flags |= s.sandwich_norm ? kFlagSandwich : 0U;
    flags |= s.zero_init_output ? kFlagZeroInit : 0U;
    flags |= s.rope ? kFlagRope : 0U;
    flags |= s.modality_embedding ? kFlagModalityEmb : 0U;
    flags |= s.suppress_invalid ? kFlagSuppress : 0U;
    flags |= s.shifted_output ? kFlagShiftedOut : 0U;
    write_u32(os, flags);
    write_u64(os, std::bit_cast<std::uint64_t>(s.rope_base));
    write_u64(os, params_.size());
    for (double p : params_) {
        write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
    }
    if (!os) {
        throw FormatError(FormatErrorKind::Io, "failed writing " + path.string());
    }
}

Transformer Transformer::load(const std::filesystem::path & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError(FormatErrorKind::Io, "cannot open checkpoint " + path.string());
    }
    FileSpec fs = read_header(is);
    Transformer model(fs.spec, 0);
    if (fs.param_count != model.params_.size()) {
        throw FormatError(FormatErrorKind::SpecMismatch, "checkpoint parameter count disagrees with its spec");
    }
    read_parameters(is, model.params_);
    return model;
}

void Transformer::load_parameters(const std::filesystem::path & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError(FormatErrorKind::Io, "cannot open checkpoint " + path.string());
    }
    FileSpec fs = read_header(is);
    const ModelSpec & o = fs.spec;
    if (o.n_layers != spec_.n_layers || o.n_heads != spec_.n_heads || o.d_model != spec_.d_model ||
        o.ffn_multiplier != spec_.ffn_multiplier || !(o.vocab == spec_.vocab) || !o.layout->same_shape(*spec_.layout) ||
        o.qk_norm != spec_.qk_norm || o.sandwich_norm != spec_.sandwich_norm ||
        o.modality_embedding != spec_.modality_embedding || fs.param_count != params_.size()) {
        throw FormatError(FormatErrorKind::SpecMismatch, "checkpoint " + path.string() + " is incompatible with the model spec");
    }
    read_parameters(is, params_);
}

std::vector<TokenId> ar_shift_input(const std::vector<TokenId> & x, const JointVocab & vocab) {
    std::vector<TokenId> in(x.size());
    if (!x.empty()) {
        in[0] = vocab.mask_id();
        std::copy(x.begin(), x.end() - 1, in.begin() + 1);
    }
    return in;
}

Logits ar_predict(const Transformer & model, const MaskedSequence & x) {
    if (model.spec().attention != Attention::Causal) {
        throw CapabilityError("ar_predict needs a causal model");
    }
    Logits raw = model.forward(ar_shift_input(x.tokens, model.vocab()), *x.layout);
    if (model.spec().suppress_invalid) {
        suppress_invalid(raw, *x.layout, model.vocab());
    }
    return raw;
}

std::vector<TokenId> shift_targets_for_finetune(const std::vector<TokenId> & x0, const std::vector<TokenId> & x_t,
                                                const JointVocab & vocab) {
    if (x0.size() != x_t.size()) {
        throw StructuralError("shift_targets_for_finetune: sequences not aligned");
    }
    std::vector<TokenId> targets(x0.size(), -1);
    for (std::size_t i = 0; i + 1 < x0.size(); ++i) {
        if (vocab.is_mask(x_t[i + 1])) {
            targets[i] = x0[i + 1];
        }
    }
    return targets;
}

} // namespace maskfuse
