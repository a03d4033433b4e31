#pragma once

#include "maskfuse/data.hpp"
#include "maskfuse/denoiser.hpp"
#include "maskfuse/objective.hpp"
#include "maskfuse/transformer.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

namespace maskfuse {

struct EntropyReport {
    double overall = 0.0;
    double text    = 0.0;
    double image   = 0.0;
};

// Empirical unigram entropy (nats) of the tokens in a set of clean sequences.
// Throws PreconditionError on an empty set.
EntropyReport token_entropy(const std::vector<MaskedSequence> & samples, const JointVocab & vocab);

enum class RetrievalMode { Joint, ImageGivenText, TextGivenImage };

const char * retrieval_mode_name(RetrievalMode m) noexcept;
RetrievalMode parse_retrieval_mode(const std::string & name);

inline constexpr std::size_t kDefaultRetrievalCandidates = 16;
inline constexpr int kDefaultRetrievalMc                 = 64;

struct RetrievalTask {
    RetrievalMode mode = RetrievalMode::Joint;
    std::vector<MaskedSequence> candidates;
    std::size_t correct_index = 0;

    // Throws PreconditionError unless there are >= 2 candidates with one shared layout.
    void validate() const;
};

struct RetrievalOutcome {
    bool correct = false;
    std::vector<double> scores;
};

// Higher is more likely. Called once per candidate.
using CandidateScorer = std::function<double(const MaskedSequence & candidate, std::size_t index)>;

// Correct iff the true candidate is the strict maximum; ties count as wrong.
RetrievalOutcome run_retrieval(const RetrievalTask & task, const CandidateScorer & scorer);

// Diffusion scoring by the likelihood bound, with common random numbers
// across candidates.
RetrievalOutcome run_retrieval(const Denoiser & model, const RetrievalTask & task, int n_mc, Rng & rng,
                               const Schedule & schedule = Schedule::linear(), double cfg_weight = 0.0);

// Causal model scoring by exact NLL.
RetrievalOutcome run_retrieval_ar(const Transformer & model, const RetrievalTask & task);

// Tasks built from a toy world: the true pair is a draw from the support and
// the distractors either re-pair its text with other grids (conditional
// modes) or are arbitrary clean sequences outside the support (joint mode).
// With out_of_support = false distractors are other support members.
std::vector<RetrievalTask> planted_retrieval_tasks(const ToyDataset & data, RetrievalMode mode, std::size_t n_tasks,
                                                   std::size_t n_candidates, bool out_of_support, Rng & rng);

struct RetrievalSummary {
    double accuracy  = 0.0;
    double std_error = 0.0; // binomial standard error of the accuracy
    std::size_t n_tasks = 0;
};

RetrievalSummary summarize(const std::vector<RetrievalOutcome> & outcomes);

struct SweepCell {
    int n_mc          = 0;
    double cfg_weight = 0.0;
    RetrievalSummary summary;
};

// Accuracy for each (n_mc, cfg weight) pair. Every cell scores with a stream
// derived from `seed` and the cell coordinates.
std::vector<SweepCell> retrieval_vs_steps_sweep(const Denoiser & model, const std::vector<RetrievalTask> & tasks,
                                                const std::vector<int> & step_counts,
                                                const std::vector<double> & cfg_weights, std::uint64_t seed,
                                                const Schedule & schedule = Schedule::linear());

void write_sweep_csv(const std::vector<SweepCell> & cells, std::ostream & out);

// Mean exact NLL (nats per token) of samples under a known distribution;
// +inf when any sample lies outside the support.
double generative_nll(const ToyJointDistribution & dist, const std::vector<MaskedSequence> & samples);

// Mean nats per token under a first-order chain run over each modality block:
// the first token is uniform over its modality and every later token repeats
// its predecessor with probability `stay`, else is uniform over the others.
// Stands in for a scoring language model that rewards repetition.
double repetition_scorer_nll(const std::vector<MaskedSequence> & samples, const JointVocab & vocab, double stay = 0.9);

} // namespace maskfuse
