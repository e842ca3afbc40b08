#include "t3po/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "t3po/errors.hpp"
#include "t3po/hash.hpp"

namespace t3po {

std::string_view scorer_name(ScorerId id) {
    switch (id) {
        case ScorerId::t3po: return "t3po";
        case ScorerId::msp: return "msp";
        case ScorerId::maxlogit: return "maxlogit";
        case ScorerId::mcdropout: return "mcdropout";
    }
    return "?";
}

std::optional<ScorerId> scorer_from_name(std::string_view name) {
    if (name == "t3po") return ScorerId::t3po;
    if (name == "msp") return ScorerId::msp;
    if (name == "maxlogit") return ScorerId::maxlogit;
    if (name == "mcdropout") return ScorerId::mcdropout;
    return std::nullopt;
}

namespace {

void require_simplex(std::span<const double> probs, const char* op) {
    if (probs.empty()) throw std::invalid_argument(std::string(op) + ": empty input");
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw std::invalid_argument(std::string(op) + ": negative probability");
        sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-6) {
        throw std::invalid_argument(std::string(op) + ": probabilities sum to " +
                                    std::to_string(sum));
    }
}

double max_of(std::span<const double> v) { return *std::max_element(v.begin(), v.end()); }

}  // namespace

double t3po_score(std::span<const double> xform_probs) {
    if (xform_probs.size() != kNumAppearanceKinds) {
        throw std::invalid_argument("t3po_score: expected 7 transform probabilities");
    }
    require_simplex(xform_probs, "t3po_score");
    return max_of(xform_probs);
}

double msp_score(std::span<const double> class_probs) {
    require_simplex(class_probs, "msp_score");
    return max_of(class_probs);
}

double maxlogit_score(std::span<const double> class_logits) {
    if (class_logits.empty()) throw std::invalid_argument("maxlogit_score: empty input");
    for (double l : class_logits) {
        if (!std::isfinite(l)) throw std::invalid_argument("maxlogit_score: non-finite logit");
    }
    return max_of(class_logits);
}

double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double mcdropout_score(const TwoHeadModel& model, const ImageTile& tile,
                       const McDropoutParams& params) {
    if (params.n_passes < 1) throw std::invalid_argument("mcdropout_score: n_passes must be >= 1");
    const double rate = params.rate.value_or(model.dropout_rate());
    if (rate > 0.0 && model.dropout_rate() == 0.0) {
        throw DataError("mcdropout: model was built without dropout");
    }
    Rng rng(mix_seed(params.seed, "mcdropout"));
    const int n = model.n_classes();
    std::vector<double> mean_probs(static_cast<size_t>(n), 0.0);
    double sum_entropy = 0.0;
    const ImageTile* tiles = &tile;
    for (int pass = 0; pass < params.n_passes; ++pass) {
        const BatchOutput out = model.forward_dropout({tiles, 1}, rng, rate);
        const auto row = out.class_prob_row(0);
        for (int k = 0; k < n; ++k) mean_probs[static_cast<size_t>(k)] += row[k];
        sum_entropy += entropy(row);
    }
    for (double& p : mean_probs) p /= params.n_passes;
    if (params.mean_of_entropies) {
        return -sum_entropy / params.n_passes;
    }
    return -entropy(mean_probs);
}

std::vector<ScoredPrediction> score_split(const TwoHeadModel& model, EvalBatchStream& stream,
                                          ScorerId scorer, const McDropoutParams& mc) {
    std::vector<ScoredPrediction> results;
    EvalBatch batch;
    while (stream.next(batch)) {
        BatchOutput out;
        try {
            out = model.forward(batch.tiles);
        } catch (const std::exception& e) {
            throw DataError("forward pass failed near tile '" + batch.paths.front() +
                            "': " + e.what());
        }
        for (size_t i = 0; i < out.batch; ++i) {
            ScoredPrediction p;
            p.path = batch.paths[i];
            p.true_class = batch.labels[i] >= 0
                               ? model.class_names()[static_cast<size_t>(batch.labels[i])]
                               : "OPEN";
            const auto probs = out.class_prob_row(i);
            p.class_probs.assign(probs.begin(), probs.end());
            p.predicted_class = static_cast<int>(
                std::max_element(probs.begin(), probs.end()) - probs.begin());
            p.scorer = scorer;
            switch (scorer) {
                case ScorerId::t3po:
                    p.osr_score = t3po_score(out.xform_prob_row(i));
                    break;
                case ScorerId::msp:
                    p.osr_score = msp_score(probs);
                    break;
                case ScorerId::maxlogit:
                    p.osr_score = maxlogit_score(out.class_logit_row(i));
                    break;
                case ScorerId::mcdropout: {
                    McDropoutParams per_tile = mc;
                    // Per-tile stream keyed on position so scoring order and
                    // batching cannot change the result.
                    per_tile.seed = mix_seed(mc.seed, "tile", results.size());
                    p.osr_score = mcdropout_score(model, batch.tiles[i], per_tile);
                    break;
                }
            }
            if (!std::isfinite(p.osr_score)) {
                throw DataError("non-finite OSR score for tile '" + p.path + "'");
            }
            results.push_back(std::move(p));
        }
    }
    return results;
}

void save_scores(const std::vector<ScoredPrediction>& scores, const TwoHeadModel& model,
                 uint64_t seed, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw DataError("cannot write score file " + file.string());
    out << "path,true_class_or_OPEN,predicted_class,osr_score,scorer_id,seed\n";
    out.precision(17);
    for (const ScoredPrediction& p : scores) {
        out << p.path << "," << p.true_class << ","
            << model.class_names()[static_cast<size_t>(p.predicted_class)] << "," << p.osr_score
            << "," << scorer_name(p.scorer) << "," << seed << "\n";
    }
    if (!out) throw DataError("failed writing score file " + file.string());
}

std::vector<ScoreRecord> load_scores(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot open score file " + file.string());
    std::string line;
    if (!std::getline(in, line) ||
        line != "path,true_class_or_OPEN,predicted_class,osr_score,scorer_id,seed") {
        throw DataError("score file " + file.string() + ": unexpected header");
    }
    std::vector<ScoreRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        fields.push_back(cur);
        if (fields.size() != 6) {
            throw DataError("score file " + file.string() + ": malformed record '" + line + "'");
        }
        ScoreRecord r;
        r.path = fields[0];
        r.true_class = fields[1];
        r.predicted_class = fields[2];
        r.osr_score = std::stod(fields[3]);
        r.scorer_id = fields[4];
        r.seed = std::stoull(fields[5]);
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace t3po
