#include "maskfuse/config.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/rng.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace maskfuse {

namespace {

std::string trim(const std::string & s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

const std::map<std::string, std::string> & RunConfig::defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "0"},
        {"output_dir", "out"},

        {"data.rows", "2"},
        {"data.cols", "2"},
        {"data.palette", "2"},
        {"data.templates", "1"},
        {"data.text_len", "3"},
        {"data.enumerable", "true"},
        {"data.num_samples", "1024"},
        {"data.image_first", "true"},
        {"data.flip_modality_prob", "0"},
        {"data.shard", ""},

        {"schedule.kind", "linear"},
        {"schedule.discrete_steps", "1000"},

        {"forward.modality_offset", "true"},
        {"forward.k_ratio", "10"},
        {"forward.n_min", "50"},
        {"forward.n_max", "1000"},
        {"forward.p_uncond", "0.1"},

        {"model.n_layers", "2"},
        {"model.n_heads", "2"},
        {"model.d_model", "32"},
        {"model.ffn_multiplier", "4"},
        {"model.attention", "bidirectional"},
        {"model.qk_norm", "true"},
        {"model.sandwich_norm", "true"},
        {"model.zero_init_output", "true"},
        {"model.rope", "true"},
        {"model.modality_embedding", "true"},
        {"model.suppress_invalid", "true"},
        {"model.rope_base", "10000"},

        {"train.steps", "1000"},
        {"train.batch_size", "32"},
        {"train.lr", "3e-4"},
        {"train.warmup_steps", "100"},
        {"train.weight_decay", "0.01"},
        {"train.beta1", "0.9"},
        {"train.beta2", "0.999"},
        {"train.grad_clip", "1.0"},
        {"train.log_every", "0"},

        {"schedule.weight_clamp", "5"},
        {"objective.normalization", "masked_mean"},

        {"finetune.from_ar_checkpoint", ""},

        {"sampler.steps", "16"},
        {"sampler.strategy", "maskgit"},
        {"sampler.top_k", "0"},
        {"sampler.top_p", "1"},
        {"sampler.temperature_start", "1"},
        {"sampler.temperature_end", "0"},
        {"sampler.cfg_weight", "1.5"},
        {"sampler.cfg_condition", "auto"},
        {"sampler.cfg_first_step", "0"},
        {"sampler.cfg_last_step", "-1"},
        {"sampler.cache_period", "0"},
        {"sampler.confidence", "post_filter"},
        {"sampler.num_samples", "64"},

        {"cfg.paper_sign", "false"},

        {"eval.n_mc", "64"},
        {"eval.denoiser", "model"},
        {"eval.retrieval_mode", "joint"},
        {"eval.retrieval_tasks", "100"},
        {"eval.candidates", "16"},
        {"eval.out_of_support", "true"},
        {"eval.cfg_weight", "0"},
        {"eval.sweep_n_mc", "8,32"},
        {"eval.sweep_cfg", "0,1.5"},
        {"eval.assert_elbo_gap", "0.15"},
        {"eval.assert_ar_gap", "0.1"},
        {"eval.assert_retrieval", "0.9"},
        {"eval.assert_entropy_max", "-1"},

        {"edit.n", "4"},
        {"edit.noise_level", "0.3"},
        {"edit.fix_text", "false"},
        {"edit.n_mc", "64"},
        {"edit.pairs", "8"},

        {"scale.mode", "planted"},
        {"scale.budgets", "1e15,1e16,1e17,1e18,1e19"},
        {"scale.grid_points", "9"},
        {"scale.grid_span", "30"},
        {"scale.d_models", "8,16,24,32"},
        {"scale.A", "1.69"},
        {"scale.B", "406.4"},
        {"scale.alpha", "0.34"},
        {"scale.E", "410.7"},
        {"scale.beta", "0.28"},
        {"scale.noise", "0"},
        {"scale.assert_exponent_tol", "0.05"},
    };
    return d;
}

RunConfig::RunConfig() : values_(defaults()) {}

bool RunConfig::has(const std::string & key) const { return values_.count(key) > 0; }

void RunConfig::set(const std::string & key, const std::string & value) {
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown config key: " + key);
    }
    it->second = value;
}

void RunConfig::parse(std::istream & in, const std::string & source) {
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = trim(line.substr(0, eq));
        if (!section.empty()) {
            key = section + "." + key;
        }
        try {
            set(key, trim(line.substr(eq + 1)));
        } catch (const ConfigError & e) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void RunConfig::load_file(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    parse(in, path.string());
}

const std::string & RunConfig::str(const std::string & key) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown config key: " + key);
    }
    return it->second;
}

long long RunConfig::integer(const std::string & key) const {
    const std::string & v = str(key);
    try {
        std::size_t used = 0;
        const long long r = std::stoll(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return r;
    } catch (const std::exception &) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

std::uint64_t RunConfig::u64(const std::string & key) const {
    const std::string & v = str(key);
    try {
        std::size_t used = 0;
        const unsigned long long r = std::stoull(v, &used);
        if (used != v.size() || v.front() == '-') {
            throw std::invalid_argument(v);
        }
        return r;
    } catch (const std::exception &) {
        throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    }
}

double RunConfig::number(const std::string & key) const {
    const std::string & v = str(key);
    try {
        std::size_t used = 0;
        const double r   = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return r;
    } catch (const std::exception &) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool RunConfig::flag(const std::string & key) const {
    const std::string & v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        return false;
    }
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<double> RunConfig::numbers(const std::string & key) const {
    std::vector<double> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) {
            continue;
        }
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception &) {
            throw ConfigError(key + ": bad list entry '" + item + "'");
        }
    }
    return out;
}

std::string RunConfig::resolved_text() const {
    std::string out;
    for (const auto & [k, v] : values_) {
        out += k + " = " + v + "\n";
    }
    return out;
}

void RunConfig::write_resolved(const std::filesystem::path & path) const {
    std::ofstream out(path);
    if (!out) {
        throw FormatError(FormatErrorKind::Io, "cannot write " + path.string());
    }
    out << "# config_hash " << hash() << "\n" << resolved_text();
}

std::string RunConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(Rng::fnv1a(resolved_text())));
    return buf;
}

} // namespace maskfuse
