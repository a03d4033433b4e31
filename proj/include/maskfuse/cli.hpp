#pragma once

#include "maskfuse/config.hpp"
#include "maskfuse/data.hpp"
#include "maskfuse/sampler.hpp"
#include "maskfuse/train.hpp"
#include "maskfuse/transformer.hpp"

#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace maskfuse {

ToyWorldConfig toy_config_from(const RunConfig & c);
Schedule schedule_from(const RunConfig & c);
ModelSpec model_spec_from(const RunConfig & c, const JointVocab & vocab, LayoutPtr layout);
TrainConfig train_config_from(const RunConfig & c);
SamplerConfig sampler_config_from(const RunConfig & c);
EditOptions edit_options_from(const RunConfig & c);

// One line per position: "CLAMP <token id>" or "FREE". Blank lines and
// '#' comments are ignored.
struct MaskSpec {
    std::vector<std::optional<TokenId>> entries;
};

MaskSpec parse_mask_spec(std::istream & in);
MaskSpec read_mask_spec(const std::filesystem::path & path);
// Throws StructuralError on a length mismatch and PreconditionError when a
// clamped id is not a clean token of its position's modality.
MaskedSequence inpaint_input(const MaskSpec & spec, LayoutPtr layout, const JointVocab & vocab);

// JSON-lines metric records {metric, value, config_hash, seed}.
class MetricsWriter {
public:
    MetricsWriter(const std::filesystem::path & path, std::string config_hash, std::uint64_t seed);
    void write(const std::string & metric, double value, const std::string & note = {});

private:
    std::ofstream out_;
    std::string hash_;
    std::uint64_t seed_;
};

struct CliContext {
    RunConfig config;
    std::string checkpoint; // path, or "oracle" for the exact toy denoiser
    std::string mask_spec;
    std::string samples; // shard of generations for eval
    bool assert_mode = false;
    std::ostream * log = nullptr;
};

// Each command writes its outputs plus the resolved config into
// config.output_dir and returns the process exit code: 0, or 1 when
// assert_mode is set and a threshold is violated.
int cmd_train(const CliContext & ctx);
int cmd_sample(const CliContext & ctx);
int cmd_inpaint(const CliContext & ctx);
int cmd_eval(const CliContext & ctx);
int cmd_retrieve(const CliContext & ctx);
int cmd_edit(const CliContext & ctx);
int cmd_scale_sweep(const CliContext & ctx);

// Dispatches by subcommand name; unknown names throw ConfigError.
int run_command(const std::string & name, const CliContext & ctx);

// Applies "--key value" / "--key=value" pairs to a config.
void apply_overrides(RunConfig & config, const std::vector<std::string> & args);

} // namespace maskfuse
