#include "maskfuse/cli.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/eval.hpp"
#include "maskfuse/parallel.hpp"
#include "maskfuse/scalelab.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <iostream>
#include <map>
#include <sstream>

namespace maskfuse {

namespace fs = std::filesystem;

ToyWorldConfig toy_config_from(const RunConfig & c) {
    ToyWorldConfig t;
    t.rows        = static_cast<int>(c.integer("data.rows"));
    t.cols        = static_cast<int>(c.integer("data.cols"));
    t.palette     = static_cast<int>(c.integer("data.palette"));
    t.templates   = static_cast<int>(c.integer("data.templates"));
    t.text_len    = static_cast<int>(c.integer("data.text_len"));
    t.enumerable  = c.flag("data.enumerable");
    t.num_samples = static_cast<int>(c.integer("data.num_samples"));
    t.image_first = c.flag("data.image_first");
    t.seed        = Rng(c.u64("seed")).substream("data").next_u64();
    return t;
}

Schedule schedule_from(const RunConfig & c) {
    return parse_schedule(c.str("schedule.kind"), static_cast<int>(c.integer("schedule.discrete_steps")));
}

ModelSpec model_spec_from(const RunConfig & c, const JointVocab & vocab, LayoutPtr layout) {
    ModelSpec s;
    s.n_layers           = static_cast<int>(c.integer("model.n_layers"));
    s.n_heads            = static_cast<int>(c.integer("model.n_heads"));
    s.d_model            = static_cast<int>(c.integer("model.d_model"));
    s.ffn_multiplier     = static_cast<int>(c.integer("model.ffn_multiplier"));
    s.vocab              = vocab;
    s.layout             = std::move(layout);
    s.qk_norm            = c.flag("model.qk_norm");
    s.sandwich_norm      = c.flag("model.sandwich_norm");
    s.zero_init_output   = c.flag("model.zero_init_output");
    s.rope               = c.flag("model.rope");
    s.modality_embedding = c.flag("model.modality_embedding");
    s.suppress_invalid   = c.flag("model.suppress_invalid");
    s.rope_base          = c.number("model.rope_base");
    const std::string & att = c.str("model.attention");
    if (att == "bidirectional") {
        s.attention = Attention::Bidirectional;
    } else if (att == "causal") {
        s.attention = Attention::Causal;
    } else {
        throw ConfigError("model.attention must be bidirectional or causal, got '" + att + "'");
    }
    s.validate();
    return s;
}

TrainConfig train_config_from(const RunConfig & c) {
    TrainConfig t;
    t.objective          = c.str("model.attention") == "causal" ? TrainObjective::Autoregressive : TrainObjective::Diffusion;
    t.steps              = static_cast<int>(c.integer("train.steps"));
    t.batch_size         = static_cast<std::size_t>(c.integer("train.batch_size"));
    t.lr                 = c.number("train.lr");
    t.warmup_steps       = static_cast<int>(c.integer("train.warmup_steps"));
    t.weight_decay       = c.number("train.weight_decay");
    t.beta1              = c.number("train.beta1");
    t.beta2              = c.number("train.beta2");
    t.grad_clip          = c.number("train.grad_clip");
    t.schedule           = schedule_from(c);
    const double clamp   = c.number("schedule.weight_clamp");
    t.weight_clamp       = clamp > 0.0 ? std::optional(clamp) : std::nullopt;
    const std::string & norm = c.str("objective.normalization");
    if (norm == "masked_mean") {
        t.normalization = LossNormalization::MaskedMean;
    } else if (norm == "sequence") {
        t.normalization = LossNormalization::Sequence;
    } else {
        throw ConfigError("objective.normalization must be masked_mean or sequence");
    }
    t.p_uncond           = c.number("forward.p_uncond");
    t.modality_offset    = c.flag("forward.modality_offset");
    t.offset.k_ratio     = c.number("forward.k_ratio");
    t.offset.n_min       = static_cast<int>(c.integer("forward.n_min"));
    t.offset.n_max       = static_cast<int>(c.integer("forward.n_max"));
    t.flip_modality_prob = c.number("data.flip_modality_prob");
    if (!c.str("finetune.from_ar_checkpoint").empty()) {
        t.objective = TrainObjective::ShiftedDiffusion;
    }
    t.validate();
    return t;
}

SamplerConfig sampler_config_from(const RunConfig & c) {
    SamplerConfig s;
    s.steps = static_cast<int>(c.integer("sampler.steps"));
    const std::string & strat = c.str("sampler.strategy");
    if (strat == "maskgit") {
        s.strategy = Strategy::MaskGit;
    } else if (strat == "ddpm") {
        s.strategy = Strategy::Ddpm;
    } else if (strat == "one_per_step") {
        s.strategy = Strategy::OnePerStep;
    } else {
        throw ConfigError("sampler.strategy must be maskgit, ddpm or one_per_step");
    }
    s.top_k       = static_cast<int>(c.integer("sampler.top_k"));
    s.top_p       = c.number("sampler.top_p");
    s.temperature = {c.number("sampler.temperature_start"), c.number("sampler.temperature_end")};
    s.cfg_weight  = c.number("sampler.cfg_weight");
    s.cfg_sign    = c.flag("cfg.paper_sign") ? CfgSign::AsPrinted : CfgSign::Extrapolate;
    const std::string & cond = c.str("sampler.cfg_condition");
    if (cond == "auto") {
        s.cfg_condition = CfgCondition::Auto;
    } else if (cond == "none") {
        s.cfg_condition = CfgCondition::None;
    } else if (cond == "text") {
        s.cfg_condition = CfgCondition::Text;
    } else if (cond == "image") {
        s.cfg_condition = CfgCondition::Image;
    } else {
        throw ConfigError("sampler.cfg_condition must be auto, none, text or image");
    }
    const auto last = c.integer("sampler.cfg_last_step");
    if (last >= 0) {
        s.cfg_step_window = std::pair<int, int>(static_cast<int>(c.integer("sampler.cfg_first_step")), static_cast<int>(last));
    }
    s.cache_period = static_cast<int>(c.integer("sampler.cache_period"));
    const std::string & conf = c.str("sampler.confidence");
    if (conf == "post_filter") {
        s.confidence = ConfidenceMode::PostFilter;
    } else if (conf == "pre_filter") {
        s.confidence = ConfidenceMode::PreFilter;
    } else {
        throw ConfigError("sampler.confidence must be post_filter or pre_filter");
    }
    s.schedule = schedule_from(c);
    s.seed     = Rng(c.u64("seed")).substream("sampling").next_u64();
    s.validate();
    return s;
}

EditOptions edit_options_from(const RunConfig & c) {
    EditOptions e;
    e.n           = static_cast<int>(c.integer("edit.n"));
    e.noise_level = c.number("edit.noise_level");
    e.fix_text    = c.flag("edit.fix_text");
    e.n_mc        = static_cast<int>(c.integer("edit.n_mc"));
    return e;
}

MaskSpec parse_mask_spec(std::istream & in) {
    MaskSpec spec;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream ls(line);
        std::string word;
        if (!(ls >> word)) {
            continue;
        }
        if (word == "FREE") {
            spec.entries.emplace_back(std::nullopt);
        } else if (word == "CLAMP") {
            long long id = 0;
            if (!(ls >> id)) {
                throw FormatError(FormatErrorKind::InvalidContent,
                                  "mask spec line " + std::to_string(lineno) + ": CLAMP needs a token id");
            }
            spec.entries.emplace_back(static_cast<TokenId>(id));
        } else {
            throw FormatError(FormatErrorKind::InvalidContent,
                              "mask spec line " + std::to_string(lineno) + ": expected CLAMP or FREE, got '" + word + "'");
        }
        std::string extra;
        if (ls >> extra) {
            throw FormatError(FormatErrorKind::InvalidContent, "mask spec line " + std::to_string(lineno) + ": trailing text");
        }
    }
    return spec;
}

MaskSpec read_mask_spec(const fs::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError(FormatErrorKind::Io, "cannot open mask spec " + path.string());
    }
    return parse_mask_spec(in);
}

MaskedSequence inpaint_input(const MaskSpec & spec, LayoutPtr layout, const JointVocab & vocab) {
    if (spec.entries.size() != layout->length()) {
        throw StructuralError("mask spec has " + std::to_string(spec.entries.size()) + " entries, layout has " +
                              std::to_string(layout->length()) + " positions");
    }
    MaskedSequence x;
    x.layout = layout;
    x.tokens.resize(spec.entries.size());
    bool any_text = false, any_image = false;
    for (std::size_t p = 0; p < spec.entries.size(); ++p) {
        const Modality m = layout->tag(p);
        if (!spec.entries[p]) {
            x.tokens[p] = vocab.mask_id();
            (m == Modality::Text ? any_text : any_image) = true;
            continue;
        }
        const TokenId id = *spec.entries[p];
        if (id < vocab.range_begin(m) || id >= vocab.range_end(m)) {
            throw PreconditionError("mask spec position " + std::to_string(p) + ": token " + std::to_string(id) +
                                    " is not a clean " + modality_name(m) + " token");
        }
        x.tokens[p] = id;
    }
    x.t_text  = any_text ? 1.0 : 0.0;
    x.t_image = any_image ? 1.0 : 0.0;
    return x;
}

MetricsWriter::MetricsWriter(const fs::path & path, std::string config_hash, std::uint64_t seed)
    : out_(path), hash_(std::move(config_hash)), seed_(seed) {
    if (!out_) {
        throw FormatError(FormatErrorKind::Io, "cannot write " + path.string());
    }
}

void MetricsWriter::write(const std::string & metric, double value, const std::string & note) {
    nlohmann::json j;
    j["metric"]      = metric;
    j["value"]       = std::isfinite(value) ? nlohmann::json(value) : nlohmann::json(nullptr);
    j["config_hash"] = hash_;
    j["seed"]        = seed_;
    if (!note.empty()) {
        j["note"] = note;
    }
    out_ << j.dump() << '\n';
    out_.flush();
}

namespace {

std::ostream & log_of(const CliContext & ctx) { return ctx.log ? *ctx.log : std::cerr; }

struct Workspace {
    fs::path dir;
    std::uint64_t seed = 0;
    std::string hash;
    std::shared_ptr<ToyDataset> toy;
    Dataset data;
};

Workspace open_workspace(const CliContext & ctx) {
    Workspace w;
    w.dir  = ctx.config.str("output_dir");
    w.seed = ctx.config.u64("seed");
    w.hash = ctx.config.hash();
    fs::create_directories(w.dir);
    ctx.config.write_resolved(w.dir / "config.resolved.cfg");
    w.toy = std::make_shared<ToyDataset>(generate_toy_dataset(toy_config_from(ctx.config)));
    const std::string & shard = ctx.config.str("data.shard");
    if (shard.empty()) {
        w.data = w.toy->data;
    } else {
        if (!fs::exists(shard)) {
            throw ConfigError("dataset shard not found: " + shard);
        }
        w.data = read_shard(shard, w.toy->data.vocab);
        if (!w.data.layout->same_shape(*w.toy->data.layout)) {
            throw ConfigError("dataset shard layout does not match the data.* config");
        }
    }
    return w;
}

struct LoadedModel {
    std::unique_ptr<Denoiser> denoiser;
    const Transformer * transformer = nullptr; // set when not the oracle
};

LoadedModel load_model(const CliContext & ctx, const Workspace & w, OracleDenoiser::OnInconsistent policy) {
    LoadedModel m;
    std::string path = ctx.checkpoint;
    if (path.empty() && ctx.config.str("eval.denoiser") == "oracle") {
        path = "oracle";
    }
    if (path.empty()) {
        throw ConfigError("this command needs --checkpoint <path|oracle>");
    }
    if (path == "oracle") {
        if (!w.toy->distribution) {
            throw ConfigError("the oracle denoiser needs data.enumerable = true");
        }
        m.denoiser = std::make_unique<OracleDenoiser>(w.toy->distribution, w.toy->data.vocab, policy);
        return m;
    }
    auto t = std::make_unique<Transformer>(Transformer::load(path));
    if (!(t->vocab() == w.data.vocab) || !t->spec().layout->same_shape(*w.data.layout)) {
        throw ConfigError("checkpoint " + path + " does not match the configured vocab and layout");
    }
    const ModelSpec want = model_spec_from(ctx.config, w.data.vocab, w.data.layout);
    const ModelSpec & got = t->spec();
    if (got.n_layers != want.n_layers || got.n_heads != want.n_heads || got.d_model != want.d_model ||
        got.ffn_multiplier != want.ffn_multiplier || got.attention != want.attention) {
        throw ConfigError("checkpoint " + path + " was built with a different model shape (" + std::to_string(got.n_layers) +
                          " layers, d_model " + std::to_string(got.d_model) + ") than the config describes");
    }
    m.transformer = t.get();
    m.denoiser    = std::move(t);
    return m;
}

// Per-token ELBO (diffusion) or exact NLL (causal), averaged under `dist`.
double model_bound_per_token(const LoadedModel & m, const ToyJointDistribution & dist, const RunConfig & c, Rng rng) {
    const int n_mc = static_cast<int>(c.integer("eval.n_mc"));
    std::vector<double> per(dist.size());
    const bool causal = m.transformer && m.transformer->spec().attention == Attention::Causal;
    parallel_for(dist.size(), [&](std::size_t i) {
        MaskedSequence x = clean_sequence(dist.sequence(i), dist.layout());
        if (causal) {
            per[i] = ar_sequence_nll(*m.transformer, x) / static_cast<double>(x.length());
        } else {
            Rng r = rng.substream(i);
            per[i] = elbo_estimate(*m.denoiser, x, n_mc, schedule_from(c), r).nats_per_token;
        }
    });
    double total = 0.0;
    for (std::size_t i = 0; i < per.size(); ++i) {
        total += dist.probability(i) * per[i];
    }
    return total;
}

void write_trace_header(std::ostream & out) { out << "sample,step,masked_count,mean_confidence,cfg_gap,full_pass\n"; }

void write_trace(std::ostream & out, std::size_t sample, const std::vector<StepTrace> & trace) {
    for (const auto & s : trace) {
        out << sample << ',' << s.step << ',' << s.masked_count << ',' << s.mean_confidence << ',' << s.cfg_gap << ','
            << (s.full_pass ? 1 : 0) << '\n';
    }
}

struct Generations {
    std::vector<MaskedSequence> samples;
    std::size_t invalid    = 0;
    std::size_t clamp_diff = 0;
};

Generations run_generations(const Denoiser & model, const MaskedSequence & initial, const RunConfig & c,
                            const fs::path & trace_path) {
    const auto n = static_cast<std::size_t>(c.integer("sampler.num_samples"));
    SamplerConfig base = sampler_config_from(c);
    std::vector<GenerationResult> results(n);
    parallel_for(n, [&](std::size_t i) {
        SamplerConfig sc = base;
        sc.seed          = Rng(base.seed).substream(i).next_u64();
        results[i]       = sc.cache_period > 0 ? generate_cached(model, initial, sc) : generate(model, initial, sc);
    });
    std::ofstream trace(trace_path);
    write_trace_header(trace);
    Generations g;
    for (std::size_t i = 0; i < n; ++i) {
        write_trace(trace, i, results[i].trace);
        const MaskedSequence & s = results[i].sequence;
        if (!validate_sequence(s, model.vocab()) || s.count_masked(model.vocab()) > 0) {
            ++g.invalid;
        }
        for (std::size_t p = 0; p < s.tokens.size(); ++p) {
            if (!model.vocab().is_mask(initial.tokens[p]) && s.tokens[p] != initial.tokens[p]) {
                ++g.clamp_diff;
            }
        }
        g.samples.push_back(s);
    }
    return g;
}

Dataset as_dataset(const std::vector<MaskedSequence> & seqs, const JointVocab & vocab, LayoutPtr layout) {
    Dataset d{vocab, std::move(layout), {}};
    for (const auto & s : seqs) {
        d.sequences.push_back(s.tokens);
    }
    return d;
}

void generation_metrics(MetricsWriter & mw, const Generations & g, const Workspace & w, const JointVocab & vocab) {
    const EntropyReport e = token_entropy(g.samples, vocab);
    mw.write("entropy", e.overall);
    mw.write("entropy_text", e.text);
    mw.write("entropy_image", e.image);
    mw.write("invalid_outputs", static_cast<double>(g.invalid));
    mw.write("clamp_violations", static_cast<double>(g.clamp_diff));
    if (w.toy->distribution) {
        mw.write("generative_nll_per_token", generative_nll(*w.toy->distribution, g.samples),
                 "exact NLL under the toy distribution; null when a sample is outside the support");
        std::size_t in_support = 0;
        for (const auto & s : g.samples) {
            in_support += w.toy->distribution->probability_of(s.tokens) > 0.0 ? 1 : 0;
        }
        mw.write("in_support_fraction", static_cast<double>(in_support) / static_cast<double>(g.samples.size()));
    }
}

} // namespace

int cmd_train(const CliContext & ctx) {
    const RunConfig & c = ctx.config;
    Workspace w         = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    write_shard(w.data, w.dir / "data.mfts");

    TrainConfig tc = train_config_from(c);
    ModelSpec spec = model_spec_from(c, w.data.vocab, w.data.layout);
    const std::string & ar_ckpt = c.str("finetune.from_ar_checkpoint");
    if (!ar_ckpt.empty()) {
        if (spec.attention != Attention::Bidirectional) {
            throw ConfigError("fine-tuning from an AR checkpoint needs model.attention = bidirectional");
        }
        spec.shifted_output = true;
    }
    const std::uint64_t init_seed = Rng(w.seed).substream("init").next_u64();
    Transformer model(spec, init_seed);
    if (!ar_ckpt.empty()) {
        if (!fs::exists(ar_ckpt)) {
            throw ConfigError("AR checkpoint not found: " + ar_ckpt);
        }
        model.load_parameters(ar_ckpt);
    }

    const int log_every = static_cast<int>(c.integer("train.log_every"));
    std::ofstream curve(w.dir / "loss.csv");
    curve << "step,loss,lr\n";
    const TrainResult r = train_model(model, w.data, tc, Rng(w.seed).substream("train"), [&](int step, double loss, double lr) {
        curve << step << ',' << loss << ',' << lr << '\n';
        if (log_every > 0 && (step % log_every == 0 || step + 1 == tc.steps)) {
            log_of(ctx) << "step " << step << " loss " << loss << " lr " << lr << '\n';
        }
    });
    model.save(w.dir / "model.bin");

    mw.write("train_loss_smoothed", r.smoothed_final_loss(), "mean of the last 5% of steps, training-objective nats");
    mw.write("tokens_seen", static_cast<double>(r.tokens_seen));
    mw.write("non_embedding_params", static_cast<double>(count_params(spec)));

    bool ok = true;
    if (w.toy->distribution) {
        const ToyJointDistribution & dist = *w.toy->distribution;
        const double exact = dist.entropy() / static_cast<double>(dist.layout()->length());
        LoadedModel lm;
        lm.transformer = &model;
        struct Ref : Denoiser {
            const Transformer & t;
            explicit Ref(const Transformer & t) : t(t) {}
            const JointVocab & vocab() const override { return t.vocab(); }
            DenoiserOutput predict(const MaskedSequence & x) const override { return t.predict(x); }
        };
        lm.denoiser = std::make_unique<Ref>(model);
        const double bound = model_bound_per_token(lm, dist, c, Rng(w.seed).substream("eval"));
        const bool causal  = spec.attention == Attention::Causal;
        const double gap   = bound - exact;
        const double limit = c.number(causal ? "eval.assert_ar_gap" : "eval.assert_elbo_gap");
        mw.write("exact_nll_per_token", exact);
        mw.write(causal ? "model_nll_per_token" : "model_elbo_per_token", bound);
        mw.write("gap_per_token", gap, causal ? "exact AR NLL minus exact NLL" : "ELBO upper bound minus exact NLL");
        ok = gap <= limit;
        log_of(ctx) << (causal ? "AR NLL " : "ELBO ") << bound << " nats/token, exact " << exact << ", gap " << gap << '\n';
    }
    return ctx.assert_mode && !ok ? 1 : 0;
}

int cmd_sample(const CliContext & ctx) {
    Workspace w = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    LoadedModel m = load_model(ctx, w, OracleDenoiser::OnInconsistent::Uniform);
    const JointVocab & vocab = m.denoiser->vocab();
    MaskedSequence initial;
    initial.layout = w.data.layout;
    initial.tokens.assign(w.data.layout->length(), vocab.mask_id());
    initial.t_text = initial.t_image = 1.0;
    const Generations g = run_generations(*m.denoiser, initial, ctx.config, w.dir / "trace.csv");
    write_shard(as_dataset(g.samples, vocab, w.data.layout), w.dir / "samples.mfts");
    generation_metrics(mw, g, w, vocab);
    return ctx.assert_mode && g.invalid > 0 ? 1 : 0;
}

int cmd_inpaint(const CliContext & ctx) {
    if (ctx.mask_spec.empty()) {
        throw ConfigError("inpaint needs --mask-spec <file>");
    }
    Workspace w = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    LoadedModel m = load_model(ctx, w, OracleDenoiser::OnInconsistent::Uniform);
    const JointVocab & vocab      = m.denoiser->vocab();
    const MaskedSequence initial  = inpaint_input(read_mask_spec(ctx.mask_spec), w.data.layout, vocab);
    const Generations g           = run_generations(*m.denoiser, initial, ctx.config, w.dir / "trace.csv");
    write_shard(as_dataset(g.samples, vocab, w.data.layout), w.dir / "inpaint.mfts");
    generation_metrics(mw, g, w, vocab);
    return ctx.assert_mode && (g.invalid > 0 || g.clamp_diff > 0) ? 1 : 0;
}

int cmd_eval(const CliContext & ctx) {
    const RunConfig & c = ctx.config;
    Workspace w         = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    bool ok = true;
    if (!ctx.samples.empty()) {
        const Dataset s = read_shard(ctx.samples, w.data.vocab);
        std::vector<MaskedSequence> seqs;
        for (std::size_t i = 0; i < s.size(); ++i) {
            seqs.push_back(s.at(i));
        }
        if (seqs.empty()) {
            throw PreconditionError("eval: samples shard is empty");
        }
        const EntropyReport e = token_entropy(seqs, s.vocab);
        mw.write("entropy", e.overall);
        mw.write("entropy_text", e.text);
        mw.write("entropy_image", e.image);
        if (w.toy->distribution && s.layout->same_shape(*w.toy->distribution->layout())) {
            mw.write("generative_nll_per_token", generative_nll(*w.toy->distribution, seqs));
        }
        const double max_entropy = c.number("eval.assert_entropy_max");
        if (max_entropy >= 0.0 && e.overall > max_entropy) {
            ok = false;
        }
        log_of(ctx) << "entropy " << e.overall << " nats (text " << e.text << ", image " << e.image << ")\n";
    }
    if (!ctx.checkpoint.empty() || c.str("eval.denoiser") == "oracle") {
        if (!w.toy->distribution) {
            throw ConfigError("eval: likelihood evaluation needs data.enumerable = true");
        }
        LoadedModel m = load_model(ctx, w, OracleDenoiser::OnInconsistent::Throw);
        const ToyJointDistribution & dist = *w.toy->distribution;
        const double exact = dist.entropy() / static_cast<double>(dist.layout()->length());
        const double bound = model_bound_per_token(m, dist, c, Rng(w.seed).substream("eval"));
        const bool causal  = m.transformer && m.transformer->spec().attention == Attention::Causal;
        mw.write("exact_nll_per_token", exact);
        mw.write(causal ? "model_nll_per_token" : "model_elbo_per_token", bound);
        mw.write("gap_per_token", bound - exact);
        ok = ok && bound - exact <= c.number(causal ? "eval.assert_ar_gap" : "eval.assert_elbo_gap");
        log_of(ctx) << "bound " << bound << " nats/token, exact " << exact << '\n';
    }
    return ctx.assert_mode && !ok ? 1 : 0;
}

int cmd_retrieve(const CliContext & ctx) {
    const RunConfig & c = ctx.config;
    Workspace w         = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    if (!w.toy->distribution) {
        throw ConfigError("retrieve: planted tasks need data.enumerable = true");
    }
    LoadedModel m            = load_model(ctx, w, OracleDenoiser::OnInconsistent::Uniform);
    const RetrievalMode mode = parse_retrieval_mode(c.str("eval.retrieval_mode"));
    Rng task_rng             = Rng(w.seed).substream("retrieval-tasks");
    const auto tasks = planted_retrieval_tasks(*w.toy, mode, static_cast<std::size_t>(c.integer("eval.retrieval_tasks")),
                                               static_cast<std::size_t>(c.integer("eval.candidates")),
                                               c.flag("eval.out_of_support"), task_rng);
    const bool causal = m.transformer && m.transformer->spec().attention == Attention::Causal;
    std::vector<RetrievalOutcome> outcomes;
    Rng score_rng = Rng(w.seed).substream("retrieval-score");
    for (const auto & t : tasks) {
        outcomes.push_back(causal ? run_retrieval_ar(*m.transformer, t)
                                  : run_retrieval(*m.denoiser, t, static_cast<int>(c.integer("eval.n_mc")), score_rng,
                                                  schedule_from(c), c.number("eval.cfg_weight")));
    }
    const RetrievalSummary s = summarize(outcomes);
    mw.write(std::string("retrieval_accuracy_") + retrieval_mode_name(mode), s.accuracy);
    mw.write("retrieval_std_error", s.std_error);
    log_of(ctx) << retrieval_mode_name(mode) << " retrieval accuracy " << s.accuracy << " over " << s.n_tasks << " tasks\n";

    if (!causal) {
        std::vector<int> n_mcs;
        for (double v : c.numbers("eval.sweep_n_mc")) {
            n_mcs.push_back(static_cast<int>(v));
        }
        const auto cells = retrieval_vs_steps_sweep(*m.denoiser, tasks, n_mcs, c.numbers("eval.sweep_cfg"),
                                                    Rng(w.seed).substream("sweep").next_u64(), schedule_from(c));
        std::ofstream csv(w.dir / "retrieval_sweep.csv");
        write_sweep_csv(cells, csv);
    }
    return ctx.assert_mode && s.accuracy < c.number("eval.assert_retrieval") ? 1 : 0;
}

int cmd_edit(const CliContext & ctx) {
    const RunConfig & c = ctx.config;
    Workspace w         = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    LoadedModel m          = load_model(ctx, w, OracleDenoiser::OnInconsistent::Uniform);
    const EditOptions opts = edit_options_from(c);
    const SamplerConfig sc = sampler_config_from(c);
    const std::size_t n    = std::min<std::size_t>(static_cast<std::size_t>(c.integer("edit.pairs")), w.data.size());
    Rng rng                = Rng(w.seed).substream("edit");
    std::vector<MaskedSequence> edited;
    std::ofstream csv(w.dir / "edit.csv");
    csv << "pair,best_index,best_score,candidate,score\n";
    double mean_best = 0.0;
    std::size_t in_support = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Rng pair_rng       = rng.substream(i);
        const EditResult r = edit_best_of_n(*m.denoiser, w.data.at(i), opts, sc, pair_rng);
        for (std::size_t k = 0; k < r.scores.size(); ++k) {
            csv << i << ',' << r.best_index << ',' << r.scores[r.best_index] << ',' << k << ',' << r.scores[k] << '\n';
        }
        mean_best += r.scores[r.best_index];
        if (w.toy->distribution && w.toy->distribution->probability_of(r.best.tokens) > 0.0) {
            ++in_support;
        }
        edited.push_back(r.best);
    }
    write_shard(as_dataset(edited, w.data.vocab, w.data.layout), w.dir / "edited.mfts");
    if (n > 0) {
        mw.write("edit_mean_best_score", mean_best / static_cast<double>(n));
        if (w.toy->distribution) {
            mw.write("edit_in_support_fraction", static_cast<double>(in_support) / static_cast<double>(n));
        }
    }
    return 0;
}

int cmd_scale_sweep(const CliContext & ctx) {
    const RunConfig & c = ctx.config;
    Workspace w         = open_workspace(ctx);
    MetricsWriter mw(w.dir / "metrics.jsonl", w.hash, w.seed);
    std::vector<Count> budgets;
    for (double b : c.numbers("scale.budgets")) {
        if (!(b >= 1.0)) {
            throw ConfigError("scale.budgets entries must be >= 1");
        }
        budgets.push_back(static_cast<Count>(b));
    }
    std::vector<std::string> skipped;
    std::vector<ScalingPoint> points;
    const std::string & mode = c.str("scale.mode");
    std::optional<double> planted_exponent;
    if (mode == "planted") {
        PlantedSurface surf{c.number("scale.A"), c.number("scale.B"), c.number("scale.alpha"), c.number("scale.E"),
                            c.number("scale.beta")};
        planted_exponent  = surf.n_opt_exponent();
        const int n_grid  = static_cast<int>(c.integer("scale.grid_points"));
        const double span = c.number("scale.grid_span");
        const double noise = c.number("scale.noise");
        Rng noise_rng      = Rng(w.seed).substream("scale-noise");
        for (Count b : budgets) {
            // The grid is centred on N = D, the balanced split of the budget.
            const double centre = std::sqrt(static_cast<double>(b) / 6.0);
            const auto lo       = static_cast<Count>(std::max(1.0, centre / std::sqrt(span)));
            const auto hi       = static_cast<Count>(std::max(1.0, centre * std::sqrt(span)));
            auto cell           = [&](std::size_t, Count n, Count d) {
                double l = surf.loss(static_cast<double>(n), static_cast<double>(d));
                if (noise > 0.0) {
                    // Box-Muller; multiplicative noise.
                    const double u1 = 1.0 - noise_rng.uniform(), u2 = noise_rng.uniform();
                    l *= 1.0 + noise * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
                }
                return l;
            };
            auto pts = isoflop_sweep({b}, log_spaced(lo, hi, n_grid), cell, 1, &skipped);
            points.insert(points.end(), pts.begin(), pts.end());
        }
    } else if (mode == "train") {
        std::vector<ModelSpec> grid;
        for (double d : c.numbers("scale.d_models")) {
            RunConfig cc = c;
            cc.set("model.d_model", std::to_string(static_cast<int>(d)));
            grid.push_back(model_spec_from(cc, w.data.vocab, w.data.layout));
        }
        points = isoflop_sweep(budgets, grid, w.data, train_config_from(c), w.seed, &skipped);
    } else {
        throw ConfigError("scale.mode must be planted or train");
    }
    for (const auto & s : skipped) {
        log_of(ctx) << "warning: skipped " << s << '\n';
    }
    std::ofstream csv(w.dir / "sweep.csv");
    write_points_csv(points, w.seed, csv);

    bool six_nd = true;
    for (const auto & p : points) {
        six_nd = six_nd && p.flops == 6 * p.params * p.tokens;
    }
    mw.write("points", static_cast<double>(points.size()));
    mw.write("six_nd_exact", six_nd ? 1.0 : 0.0);
    bool ok = six_nd;
    try {
        const PipelineResult fit = fit_pipeline(points);
        std::ofstream minima(w.dir / "minima.csv");
        minima << "budget,n_opt\n";
        for (const auto & [cc, n] : fit.minima) {
            minima << cc << ',' << n << '\n';
        }
        mw.write("n_opt_exponent", fit.law.exponent,
                 "losses are raw training-objective nats; a diffusion ELBO bounds the NLL from above");
        mw.write("n_opt_coefficient", fit.law.coefficient);
        mw.write("fit_residual", fit.law.residual);
        if (planted_exponent) {
            const double rel = std::abs(fit.law.exponent - *planted_exponent) / *planted_exponent;
            mw.write("planted_exponent", *planted_exponent);
            mw.write("exponent_relative_error", rel);
            ok = ok && rel <= c.number("scale.assert_exponent_tol");
        }
        log_of(ctx) << "N_opt ~ C^" << fit.law.exponent << " over " << fit.minima.size() << " budgets\n";
    } catch (const Error & e) {
        mw.write("fit_failed", 1.0, e.what());
        log_of(ctx) << "fit failed: " << e.what() << '\n';
        ok = false;
    }
    return ctx.assert_mode && !ok ? 1 : 0;
}

int run_command(const std::string & name, const CliContext & ctx) {
    static const std::map<std::string, int (*)(const CliContext &)> table = {
        {"train", cmd_train},   {"sample", cmd_sample}, {"inpaint", cmd_inpaint},         {"eval", cmd_eval},
        {"retrieve", cmd_retrieve}, {"edit", cmd_edit}, {"scale-sweep", cmd_scale_sweep},
    };
    auto it = table.find(name);
    if (it == table.end()) {
        throw ConfigError("unknown command: " + name);
    }
    return it->second(ctx);
}

void apply_overrides(RunConfig & config, const std::vector<std::string> & args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string & a = args[i];
        if (a.rfind("--", 0) != 0) {
            throw ConfigError("unexpected argument: " + a);
        }
        std::string key = a.substr(2);
        const auto eq   = key.find('=');
        if (eq != std::string::npos) {
            config.set(key.substr(0, eq), key.substr(eq + 1));
            continue;
        }
        if (i + 1 >= args.size()) {
            throw ConfigError("missing value for --" + key);
        }
        config.set(key, args[++i]);
    }
}

} // namespace maskfuse
