#include "helpers.hpp"

#include "maskfuse/cli.hpp"
#include "maskfuse/errors.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <sstream>

using namespace maskfuse;

namespace {

std::map<std::string, double> read_metrics(const std::filesystem::path & dir) {
    std::map<std::string, double> out;
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        out[j.at("metric").get<std::string>()] = j.at("value").is_null() ? NAN : j.at("value").get<double>();
    }
    return out;
}

std::string slurp(const std::filesystem::path & p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CliContext context(const std::string & name) {
    CliContext ctx;
    const auto dir = testing::temp_path(name);
    ctx.config.set("output_dir", dir.string());
    static std::ostringstream sink;
    ctx.log = &sink;
    return ctx;
}

} // namespace

TEST_CASE("run config") {
    RunConfig c;
    CHECK(c.integer("model.d_model") == 32);
    CHECK(c.number("sampler.cfg_weight") == 1.5);
    CHECK_THROWS_AS(c.set("model.dmodel", "3"), ConfigError);
    std::istringstream in("seed = 7\n# comment\n[model]\nd_model = 16  # trailing\n[train]\nsteps=5\n");
    c.parse(in);
    CHECK(c.u64("seed") == 7);
    CHECK(c.integer("model.d_model") == 16);
    CHECK(c.integer("train.steps") == 5);
    std::istringstream bad("[model]\nwidth = 3\n");
    CHECK_THROWS_AS(c.parse(bad), ConfigError);
    std::istringstream junk("just words\n");
    CHECK_THROWS_AS(c.parse(junk), ConfigError);
    CHECK(c.numbers("eval.sweep_cfg") == std::vector<double>{0.0, 1.5});

    RunConfig d;
    CHECK(d.hash() == RunConfig().hash());
    CHECK(d.hash().size() == 16);
    d.set("seed", "7");
    CHECK(d.hash() != RunConfig().hash());
    CHECK(d.resolved_text().find("model.d_model = 32") != std::string::npos);

    std::vector<std::string> args{"--train.steps", "9", "--model.qk_norm=false"};
    apply_overrides(d, args);
    CHECK(d.integer("train.steps") == 9);
    CHECK_FALSE(d.flag("model.qk_norm"));
    std::vector<std::string> unknown{"--nope", "1"};
    CHECK_THROWS_AS(apply_overrides(d, unknown), ConfigError);
}

TEST_CASE("mask specs") {
    const JointVocab v = build_vocab(3, 2);
    const auto layout  = make_layout(ModalityLayout::blocks(1, 2, 2));
    std::istringstream in("CLAMP 3\nFREE\n\n# note\nCLAMP 1\nFREE\n");
    const MaskSpec spec = parse_mask_spec(in);
    REQUIRE(spec.entries.size() == 4);
    const auto x = inpaint_input(spec, layout, v);
    CHECK(x.tokens == std::vector<TokenId>{3, v.mask_id(), 1, v.mask_id()});

    MaskSpec short_spec{{std::nullopt}};
    CHECK_THROWS_AS(inpaint_input(short_spec, layout, v), StructuralError);
    MaskSpec wrong{{TokenId(0), std::nullopt, TokenId(1), std::nullopt}};
    CHECK_THROWS_AS(inpaint_input(wrong, layout, v), PreconditionError);
    for (const char * text : {"CLAMP\n", "HOLD 3\n", "FREE 2\n"}) {
        std::istringstream s(text);
        try {
            parse_mask_spec(s);
            FAIL("expected a format error");
        } catch (const FormatError & e) {
            CHECK(e.kind() == FormatErrorKind::InvalidContent);
        }
    }
}

TEST_CASE("retrieve and eval with the exact denoiser") {
    auto ctx       = context("retrieve");
    ctx.checkpoint = "oracle";
    ctx.assert_mode = true;
    ctx.config.set("eval.retrieval_tasks", "20");
    ctx.config.set("eval.n_mc", "16");
    ctx.config.set("eval.sweep_n_mc", "4");
    ctx.config.set("eval.sweep_cfg", "0");
    CHECK(run_command("retrieve", ctx) == 0);
    const auto dir = std::filesystem::path(ctx.config.str("output_dir"));
    CHECK(read_metrics(dir)["retrieval_accuracy_joint"] == 1.0);
    CHECK(RunConfig().hash() != ctx.config.hash());
    CHECK(slurp(dir / "config.resolved.cfg").find(ctx.config.hash()) != std::string::npos);
    CHECK(std::filesystem::exists(dir / "retrieval_sweep.csv"));

    // Constant-token generations.
    const auto toy = generate_toy_dataset(toy_config_from(ctx.config));
    Dataset constant{toy.data.vocab, toy.data.layout, {}};
    for (int i = 0; i < 5; ++i) {
        std::vector<TokenId> t(toy.data.layout->length());
        for (std::size_t p = 0; p < t.size(); ++p) {
            t[p] = toy.data.vocab.range_begin(toy.data.layout->tag(p));
        }
        constant.sequences.push_back(t);
    }
    const auto shard = testing::temp_path("constant.mfts");
    write_shard(constant, shard);
    auto ev       = context("eval");
    ev.samples    = shard.string();
    ev.config.set("eval.denoiser", "none");
    CHECK(run_command("eval", ev) == 0);
    const auto m = read_metrics(ev.config.str("output_dir"));
    CHECK(m.at("entropy_text") == 0.0);
    CHECK(m.at("entropy_image") == 0.0);

    CHECK_THROWS_AS(run_command("fly", ev), ConfigError);
}

TEST_CASE("planted scale sweep command") {
    auto ctx        = context("scale");
    ctx.assert_mode = true;
    CHECK(run_command("scale-sweep", ctx) == 0);
    const auto m = read_metrics(ctx.config.str("output_dir"));
    CHECK(m.at("six_nd_exact") == 1.0);
    CHECK(m.at("exponent_relative_error") < 0.05);
}

TEST_CASE("training reruns are reproducible") {
    auto run = [](const std::string & name) {
        auto ctx = context(name);
        ctx.config.set("train.steps", "20");
        ctx.config.set("train.warmup_steps", "2");
        ctx.config.set("model.d_model", "8");
        ctx.config.set("eval.n_mc", "4");
        REQUIRE(run_command("train", ctx) == 0);
        return std::filesystem::path(ctx.config.str("output_dir"));
    };
    const auto a = run("train_a");
    const auto b = run("train_b");
    CHECK(slurp(a / "loss.csv") == slurp(b / "loss.csv"));
    CHECK(slurp(a / "loss.csv").size() > 20);
    CHECK(std::filesystem::exists(a / "model.bin"));

    auto s        = context("sample");
    s.checkpoint  = (a / "model.bin").string();
    s.config.set("model.d_model", "8");
    s.config.set("sampler.num_samples", "4");
    s.config.set("sampler.steps", "4");
    CHECK(run_command("sample", s) == 0);
    const auto out = std::filesystem::path(s.config.str("output_dir"));
    CHECK(read_shard(out / "samples.mfts").size() == 4);
    CHECK(slurp(out / "trace.csv").rfind("sample,step,masked_count", 0) == 0);

    s.config.set("model.d_model", "16");
    CHECK_THROWS_AS(run_command("sample", s), Error);
}
