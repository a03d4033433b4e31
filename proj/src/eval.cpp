#include "maskfuse/eval.hpp"

#include "maskfuse/errors.hpp"
#include "maskfuse/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <set>

namespace maskfuse {

namespace {

double entropy_of(const std::map<TokenId, std::size_t> & counts) {
    std::size_t total = 0;
    for (const auto & [id, c] : counts) {
        total += c;
    }
    if (total == 0) {
        return 0.0;
    }
    double h = 0.0;
    for (const auto & [id, c] : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return std::max(0.0, h);
}

ScoreMode score_mode(RetrievalMode m) {
    switch (m) {
    case RetrievalMode::Joint:
        return ScoreMode::Joint;
    case RetrievalMode::ImageGivenText:
        return ScoreMode::ImageGivenText;
    case RetrievalMode::TextGivenImage:
        return ScoreMode::TextGivenImage;
    }
    return ScoreMode::Joint;
}

} // namespace

EntropyReport token_entropy(const std::vector<MaskedSequence> & samples, const JointVocab & vocab) {
    if (samples.empty()) {
        throw PreconditionError("token_entropy needs at least one sample");
    }
    std::map<TokenId, std::size_t> all, text, image;
    for (const auto & s : samples) {
        for (TokenId id : s.tokens) {
            ++all[id];
            if (vocab.is_text(id)) {
                ++text[id];
            } else if (vocab.is_image(id)) {
                ++image[id];
            }
        }
    }
    return {entropy_of(all), entropy_of(text), entropy_of(image)};
}

const char * retrieval_mode_name(RetrievalMode m) noexcept {
    switch (m) {
    case RetrievalMode::Joint:
        return "joint";
    case RetrievalMode::ImageGivenText:
        return "image_given_text";
    case RetrievalMode::TextGivenImage:
        return "text_given_image";
    }
    return "?";
}

RetrievalMode parse_retrieval_mode(const std::string & name) {
    if (name == "joint") {
        return RetrievalMode::Joint;
    }
    if (name == "image_given_text") {
        return RetrievalMode::ImageGivenText;
    }
    if (name == "text_given_image") {
        return RetrievalMode::TextGivenImage;
    }
    throw ConfigError("unknown retrieval mode: " + name);
}

void RetrievalTask::validate() const {
    if (candidates.size() < 2) {
        throw PreconditionError("a retrieval task needs at least two candidates");
    }
    if (correct_index >= candidates.size()) {
        throw PreconditionError("correct_index out of range");
    }
    for (const auto & c : candidates) {
        if (!c.layout || !(*c.layout == *candidates.front().layout)) {
            throw PreconditionError("retrieval candidates must share one layout");
        }
    }
}

RetrievalOutcome run_retrieval(const RetrievalTask & task, const CandidateScorer & scorer) {
    task.validate();
    RetrievalOutcome out;
    out.scores.resize(task.candidates.size());
    parallel_for(task.candidates.size(), [&](std::size_t i) { out.scores[i] = scorer(task.candidates[i], i); });
    const double truth = out.scores[task.correct_index];
    out.correct        = !std::isnan(truth);
    for (std::size_t i = 0; i < out.scores.size() && out.correct; ++i) {
        if (i != task.correct_index && !(out.scores[i] < truth)) {
            out.correct = false;
        }
    }
    return out;
}

RetrievalOutcome run_retrieval(const Denoiser & model, const RetrievalTask & task, int n_mc, Rng & rng,
                               const Schedule & schedule, double cfg_weight) {
    // One stream shared by every candidate of this task.
    const Rng shared = rng.substream("retrieval");
    rng.next_u64();
    const ScoreMode mode = score_mode(task.mode);
    return run_retrieval(task, [&](const MaskedSequence & c, std::size_t) {
        return joint_likelihood_score(model, c, n_mc, shared, mode, schedule, cfg_weight).value;
    });
}

RetrievalOutcome run_retrieval_ar(const Transformer & model, const RetrievalTask & task) {
    return run_retrieval(task, [&](const MaskedSequence & c, std::size_t) {
        switch (task.mode) {
        case RetrievalMode::Joint:
            return -ar_sequence_nll(model, c);
        case RetrievalMode::ImageGivenText:
            return -ar_conditional_nll(model, c, Modality::Image);
        case RetrievalMode::TextGivenImage:
            return -ar_conditional_nll(model, c, Modality::Text);
        }
        return 0.0;
    });
}

std::vector<RetrievalTask> planted_retrieval_tasks(const ToyDataset & data, RetrievalMode mode, std::size_t n_tasks,
                                                   std::size_t n_candidates, bool out_of_support, Rng & rng) {
    if (!data.distribution) {
        throw PreconditionError("planted retrieval tasks need an enumerable toy dataset");
    }
    if (n_candidates < 2) {
        throw PreconditionError("a retrieval task needs at least two candidates");
    }
    const ToyJointDistribution & dist = *data.distribution;
    const JointVocab & vocab          = data.data.vocab;
    const LayoutPtr & layout          = dist.layout();

    // The modality that varies across candidates; the other one is shared
    // with the true pair. Joint mode varies everything.
    const std::optional<Modality> varied = mode == RetrievalMode::ImageGivenText  ? std::optional(Modality::Image)
                                           : mode == RetrievalMode::TextGivenImage ? std::optional(Modality::Text)
                                                                                   : std::nullopt;
    std::vector<RetrievalTask> tasks;
    tasks.reserve(n_tasks);
    for (std::size_t t = 0; t < n_tasks; ++t) {
        const std::vector<TokenId> & truth = dist.sequence(dist.sample_index(rng));
        std::set<std::vector<TokenId>> seen{truth};
        std::vector<MaskedSequence> cands;
        cands.push_back(clean_sequence(truth, layout));
        std::size_t attempts = 0;
        while (cands.size() < n_candidates) {
            if (++attempts > 20000) {
                throw ConfigError("toy world too small for the requested distractor count");
            }
            std::vector<TokenId> d = truth;
            if (out_of_support) {
                for (std::size_t p = 0; p < d.size(); ++p) {
                    const Modality m = layout->tag(p);
                    if (!varied || m == *varied) {
                        const auto n = static_cast<std::uint64_t>(vocab.modality_size(m));
                        d[p]         = vocab.range_begin(m) + static_cast<TokenId>(rng.below(n));
                    }
                }
            } else {
                const auto & other = dist.sequence(rng.below(dist.size()));
                for (std::size_t p = 0; p < d.size(); ++p) {
                    if (!varied || layout->tag(p) == *varied) {
                        d[p] = other[p];
                    }
                }
            }
            if (out_of_support && dist.probability_of(d) > 0.0) {
                continue;
            }
            if (!seen.insert(d).second) {
                continue;
            }
            cands.push_back(clean_sequence(std::move(d), layout));
        }
        const std::size_t pos = rng.below(n_candidates);
        std::swap(cands[0], cands[pos]);
        tasks.push_back({mode, std::move(cands), pos});
    }
    return tasks;
}

RetrievalSummary summarize(const std::vector<RetrievalOutcome> & outcomes) {
    RetrievalSummary s;
    s.n_tasks = outcomes.size();
    if (outcomes.empty()) {
        return s;
    }
    std::size_t correct = 0;
    for (const auto & o : outcomes) {
        correct += o.correct ? 1 : 0;
    }
    s.accuracy  = static_cast<double>(correct) / static_cast<double>(outcomes.size());
    s.std_error = std::sqrt(s.accuracy * (1.0 - s.accuracy) / static_cast<double>(outcomes.size()));
    return s;
}

std::vector<SweepCell> retrieval_vs_steps_sweep(const Denoiser & model, const std::vector<RetrievalTask> & tasks,
                                                const std::vector<int> & step_counts,
                                                const std::vector<double> & cfg_weights, std::uint64_t seed,
                                                const Schedule & schedule) {
    std::vector<SweepCell> cells;
    for (std::size_t a = 0; a < step_counts.size(); ++a) {
        for (std::size_t b = 0; b < cfg_weights.size(); ++b) {
            Rng rng = Rng(seed).substream("sweep").substream(a).substream(b);
            std::vector<RetrievalOutcome> outcomes;
            outcomes.reserve(tasks.size());
            for (const auto & task : tasks) {
                outcomes.push_back(run_retrieval(model, task, step_counts[a], rng, schedule, cfg_weights[b]));
            }
            cells.push_back({step_counts[a], cfg_weights[b], summarize(outcomes)});
        }
    }
    return cells;
}

void write_sweep_csv(const std::vector<SweepCell> & cells, std::ostream & out) {
    out << "n_mc,cfg_weight,accuracy,std_error,n_tasks\n";
    for (const auto & c : cells) {
        out << c.n_mc << ',' << c.cfg_weight << ',' << c.summary.accuracy << ',' << c.summary.std_error << ','
            << c.summary.n_tasks << '\n';
    }
}

double generative_nll(const ToyJointDistribution & dist, const std::vector<MaskedSequence> & samples) {
    if (samples.empty()) {
        throw PreconditionError("generative_nll needs at least one sample");
    }
    double total        = 0.0;
    std::size_t tokens  = 0;
    for (const auto & s : samples) {
        total += dist.nll(s.tokens);
        tokens += s.tokens.size();
    }
    return total / static_cast<double>(tokens);
}

double repetition_scorer_nll(const std::vector<MaskedSequence> & samples, const JointVocab & vocab, double stay) {
    if (samples.empty()) {
        throw PreconditionError("repetition_scorer_nll needs at least one sample");
    }
    if (!(stay > 0.0 && stay < 1.0)) {
        throw DomainError("repetition scorer stay probability must lie in (0, 1)");
    }
    double total       = 0.0;
    std::size_t tokens = 0;
    for (const auto & s : samples) {
        for (Modality m : {Modality::Text, Modality::Image}) {
            const double size = vocab.modality_size(m);
            const auto & pos  = s.layout->positions(m);
            for (std::size_t k = 0; k < pos.size(); ++k) {
                if (k == 0 || size <= 1) {
                    total += std::log(size);
                } else if (s.tokens[pos[k]] == s.tokens[pos[k - 1]]) {
                    total -= std::log(stay);
                } else {
                    total -= std::log((1.0 - stay) / (size - 1.0));
                }
            }
            tokens += pos.size();
        }
    }
    return total / static_cast<double>(tokens);
}

} // namespace maskfuse
