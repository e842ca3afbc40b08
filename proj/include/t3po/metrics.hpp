#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

namespace t3po {

// Fraction of positions where prediction equals label. Rejects empty or
// mismatched inputs.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

// Probability that a random closed score exceeds a random open score,
// ties counted one half: Mann-Whitney rank statistic with midranks,
// O(n log n). Scores follow the shared orientation higher = closed.
double auroc(std::span<const double> closed_scores, std::span<const double> open_scores);

// Per-seed result of one (split, scorer) run.
struct RunResult {
    std::string split_id;
    std::string scorer_id;
    uint64_t seed = 0;
    double closed_acc = 0.0;
    double closed_open_auc = 0.0;
    size_t n_closed_test = 0;
    size_t n_open_test = 0;
};

// Mean and 95% Student-t confidence half-width over seeds. A single run
// reports half-width 0 by convention.
struct AggregateResult {
    std::string split_id;
    std::string scorer_id;
    size_t n_runs = 0;
    std::vector<uint64_t> seeds;
    double mean_acc = 0.0;
    double mean_auc = 0.0;
    double ci95_acc = 0.0;
    double ci95_auc = 0.0;
};

AggregateResult aggregate(const std::vector<RunResult>& runs);

// Best scorer by mean plus every scorer whose mean lies within the best
// scorer's confidence interval.
struct BoldMarks {
    std::string best;
    std::set<std::string> bold;
};

BoldMarks bold_rule(const std::vector<AggregateResult>& aggregates, bool by_auc);

// Two-sided 95% Student-t critical value, t_{0.975, df}.
double student_t_975(int df);

}  // namespace t3po
