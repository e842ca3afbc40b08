#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "t3po/dataset.hpp"
#include "t3po/nnet.hpp"

namespace t3po {

// Every scorer shares one orientation: higher score = more likely closed
// set. The AUROC in metrics assumes it.
enum class ScorerId { t3po, msp, maxlogit, mcdropout };

std::string_view scorer_name(ScorerId id);
std::optional<ScorerId> scorer_from_name(std::string_view name);

// Max softmax probability of the transform head on an untransformed test
// tile; range [1/7, 1]. Rejects non-simplex input.
double t3po_score(std::span<const double> xform_probs);

// Max softmax probability of the class head.
double msp_score(std::span<const double> class_probs);

// Max pre-softmax activation of the class head (unbounded). Rejects
// non-finite input.
double maxlogit_score(std::span<const double> class_logits);

// -sum p ln p with 0 ln 0 = 0.
double entropy(std::span<const double> probs);

struct McDropoutParams {
    int n_passes = 32;
    uint64_t seed = 0;
    std::optional<double> rate;  // defaults to the model's dropout rate
    bool mean_of_entropies = false;  // alternative reading of the baseline
};

// n stochastic passes with dropout active on the class-head pathway;
// scores by negated predictive entropy of the mean distribution (or the
// negated mean of per-pass entropies when mean_of_entropies is set).
double mcdropout_score(const TwoHeadModel& model, const ImageTile& tile,
                       const McDropoutParams& params);

struct ScoredPrediction {
    std::string path;
    std::string true_class;  // "OPEN" for open-set tiles
    int predicted_class = 0;
    std::vector<double> class_probs;
    double osr_score = 0.0;
    ScorerId scorer = ScorerId::t3po;
};

// One record per tile in iterator order. Classification always comes from
// the deterministic class-head pass, whatever the scorer.
std::vector<ScoredPrediction> score_split(const TwoHeadModel& model, EvalBatchStream& stream,
                                          ScorerId scorer, const McDropoutParams& mc = {});

// CSV with columns path, true_class_or_OPEN, predicted_class, osr_score,
// scorer_id, seed.
void save_scores(const std::vector<ScoredPrediction>& scores, const TwoHeadModel& model,
                 uint64_t seed, const std::filesystem::path& file);

struct ScoreRecord {
    std::string path;
    std::string true_class;
    std::string predicted_class;
    double osr_score = 0.0;
    std::string scorer_id;
    uint64_t seed = 0;
};

std::vector<ScoreRecord> load_scores(const std::filesystem::path& file);

}  // namespace t3po
