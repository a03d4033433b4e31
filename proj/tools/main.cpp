#include "maskfuse/cli.hpp"
#include "maskfuse/errors.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char ** argv) {
    CLI::App app{"maskfuse: joint text+image masked discrete diffusion at desk scale"};
    app.require_subcommand(1);
    app.allow_extras();
    app.fallthrough();

    std::string config_path, checkpoint, mask_spec, samples, out_dir;
    bool assert_mode = false;
    app.add_option("--config", config_path, "key = value run config");
    app.add_option("--checkpoint", checkpoint, "model checkpoint, or 'oracle' for the exact toy denoiser");
    app.add_option("--mask-spec", mask_spec, "inpainting spec: one CLAMP <id> / FREE line per position");
    app.add_option("--samples", samples, "shard of generations to score (eval)");
    app.add_option("--out", out_dir, "output directory (same as --output_dir)");
    app.add_flag("--assert", assert_mode, "exit nonzero when an acceptance threshold is violated");

    for (const char * name : {"train", "sample", "inpaint", "eval", "retrieve", "edit", "scale-sweep"}) {
        app.add_subcommand(name)->allow_extras();
    }

    CLI11_PARSE(app, argc, argv);
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        maskfuse::CliContext ctx;
        if (!config_path.empty()) {
            ctx.config.load_file(config_path);
        }
        std::vector<std::string> extras = app.remaining();
        maskfuse::apply_overrides(ctx.config, extras);
        if (!out_dir.empty()) {
            ctx.config.set("output_dir", out_dir);
        }
        ctx.checkpoint  = checkpoint;
        ctx.mask_spec   = mask_spec;
        ctx.samples     = samples;
        ctx.assert_mode = assert_mode;
        ctx.log         = &std::cerr;
        return maskfuse::run_command(command, ctx);
    } catch (const maskfuse::Error & e) {
        std::cerr << "maskfuse " << command << ": " << e.what() << '\n';
        return 2;
    }
}
