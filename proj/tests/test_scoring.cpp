#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "t3po/dataset.hpp"
#include "t3po/errors.hpp"
#include "t3po/scoring.hpp"

using namespace t3po;
namespace fs = std::filesystem;

namespace {

std::vector<double> softmax(std::vector<double> logits) {
    return softmax_rows(logits, 1, static_cast<int>(logits.size()));
}

TwoHeadModel tiny_model(double dropout, uint64_t seed = 7) {
    return TwoHeadModel(BackboneSpec{"micro2", false}, 3, {"a", "b", "c"}, dropout, seed);
}

ImageTile noise_tile(uint64_t seed) {
    Rng rng(seed);
    ImageTile tile(16, 16);
    for (auto& b : tile.data()) b = static_cast<uint8_t>(rng.uniform_int(256));
    return tile;
}

}  // namespace

TEST_CASE("t3po score is the max transform probability") {
    const std::vector<double> uniform(7, 1.0 / 7.0);
    CHECK(t3po_score(uniform) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    std::vector<double> onehot(7, 0.0);
    onehot[2] = 1.0;
    CHECK(t3po_score(onehot) == 1.0);
    const std::vector<double> probs{0.5, 0.2, 0.1, 0.1, 0.05, 0.03, 0.02};
    CHECK(t3po_score(probs) == 0.5);

    CHECK_THROWS(t3po_score(std::vector<double>{0.5, 0.5}));  // wrong arity
    CHECK_THROWS(t3po_score(std::vector<double>(7, 0.2)));    // sums to 1.4
    std::vector<double> negative(7, 1.1 / 6.0);
    negative[0] = 1.0 - 6.0 * (1.1 / 6.0);  // negative, sums to 1
    CHECK_THROWS(t3po_score(negative));
}

TEST_CASE("msp score and softmax shift invariance") {
    CHECK(msp_score(std::vector<double>(5, 0.2)) == doctest::Approx(0.2));
    std::vector<double> onehot(4, 0.0);
    onehot[3] = 1.0;
    CHECK(msp_score(onehot) == 1.0);

    const std::vector<double> logits{1.2, -0.3, 0.8};
    std::vector<double> shifted = logits;
    for (double& l : shifted) l += 17.5;
    CHECK(msp_score(softmax(logits)) ==
          doctest::Approx(msp_score(softmax(shifted))).epsilon(1e-12));
}

TEST_CASE("maxlogit score") {
    CHECK(maxlogit_score(std::vector<double>{2.0, -1.0, 0.5}) == 2.0);
    CHECK(maxlogit_score(std::vector<double>{3.3, 3.3, 3.3}) == 3.3);
    CHECK_THROWS(maxlogit_score(std::vector<double>{1.0, std::nan("")}));

    // Exact shift covariance.
    const std::vector<double> logits{0.4, 1.9, -2.2};
    std::vector<double> shifted = logits;
    for (double& l : shifted) l += 0.7;
    CHECK(maxlogit_score(shifted) == maxlogit_score(logits) + 0.7);
}

TEST_CASE("msp and maxlogit are not order-equivalent") {
    const std::vector<double> peaked{4.0, 0.0, 0.0};
    const std::vector<double> flat{3.9, 3.8, 3.8};
    // On these two rows both scores order the same way...
    CHECK(msp_score(softmax(peaked)) == doctest::Approx(0.96435).epsilon(1e-3));
    CHECK(msp_score(softmax(flat)) == doctest::Approx(0.35591).epsilon(1e-3));
    CHECK(maxlogit_score(peaked) > maxlogit_score(flat));
    CHECK(msp_score(softmax(peaked)) > msp_score(softmax(flat)));
    // ...but a slightly higher flat row inverts maxlogit only.
    const std::vector<double> flat_high{4.1, 4.05, 4.0};
    CHECK(maxlogit_score(flat_high) > maxlogit_score(peaked));
    CHECK(msp_score(softmax(flat_high)) < msp_score(softmax(peaked)));
}

TEST_CASE("scores are permutation equivariant") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> logits(7);
        for (double& l : logits) l = rng.uniform(-3.0, 3.0);
        std::vector<double> probs = softmax(logits);
        const double score = t3po_score(probs);
        rng.shuffle(probs);
        CHECK(t3po_score(probs) == score);
    }
}

TEST_CASE("entropy of uniform is ln N") {
    CHECK(entropy(std::vector<double>(5, 0.2)) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK(entropy(std::vector<double>{1.0, 0.0}) == 0.0);
}

TEST_CASE("mcdropout with rate zero equals negative single-pass entropy") {
    const TwoHeadModel model = tiny_model(0.0);
    const ImageTile tile = noise_tile(3);
    McDropoutParams params;
    params.n_passes = 32;
    params.seed = 11;
    const double score = mcdropout_score(model, tile, params);
    const std::vector<ImageTile> tiles{tile};
    const BatchOutput out = model.forward(tiles);
    const double expected = -entropy(out.class_prob_row(0));
    CHECK(score == doctest::Approx(expected).epsilon(1e-9));
    // Entropy of an N-way distribution is at most ln N.
    CHECK(score >= -std::log(3.0) - 1e-12);
}

TEST_CASE("mcdropout is reproducible and parameter-checked") {
    const TwoHeadModel model = tiny_model(0.3);
    const ImageTile tile = noise_tile(4);
    McDropoutParams params;
    params.n_passes = 16;
    params.seed = 21;
    const double a = mcdropout_score(model, tile, params);
    const double b = mcdropout_score(model, tile, params);
    CHECK(a == b);
    params.seed = 22;
    CHECK(mcdropout_score(model, tile, params) != a);

    params.n_passes = 0;
    CHECK_THROWS(mcdropout_score(model, tile, params));

    // Requesting dropout on a dropout-free model is a configuration error.
    const TwoHeadModel no_dropout = tiny_model(0.0);
    McDropoutParams forced;
    forced.rate = 0.3;
    CHECK_THROWS_AS(mcdropout_score(no_dropout, tile, forced), DataError);
}

TEST_CASE("mean-of-entropies option changes the aggregation only") {
    const TwoHeadModel model = tiny_model(0.0);
    const ImageTile tile = noise_tile(6);
    McDropoutParams a;
    a.mean_of_entropies = false;
    McDropoutParams b;
    b.mean_of_entropies = true;
    // With dropout off every pass is identical, so both readings agree.
    CHECK(mcdropout_score(model, tile, a) ==
          doctest::Approx(mcdropout_score(model, tile, b)).epsilon(1e-12));
}

TEST_CASE("score_split emits one in-order record per tile for every scorer") {
    const fs::path root = "tmp_scoring_data";
    make_synthetic(root, 20, 16, 3);
    const DatasetIndex index = scan_dataset(root, 16);
    SplitConfig cfg;
    cfg.dataset = "synthetic";
    cfg.name = "S1";
    cfg.closed_classes = {"blobs", "checker", "stripes"};
    cfg.open_classes = {"graynoise"};
    cfg.seed = 2;
    const SplitAssignment split = build_split(index, cfg);
    const TwoHeadModel model = tiny_model(0.2);

    std::vector<int> predicted;
    for (ScorerId scorer :
         {ScorerId::t3po, ScorerId::msp, ScorerId::maxlogit, ScorerId::mcdropout}) {
        EvalBatchStream stream(split, SplitPart::test_open, 7);
        McDropoutParams mc;
        mc.n_passes = 4;
        mc.seed = 9;
        const auto scores = score_split(model, stream, scorer, mc);
        REQUIRE(scores.size() == split.test_open.size());
        for (size_t i = 0; i < scores.size(); ++i) {
            CHECK(scores[i].path == split.test_open[i].path);
            CHECK(scores[i].true_class == "OPEN");
            CHECK(std::isfinite(scores[i].osr_score));
            if (scorer == ScorerId::t3po) {
                CHECK(scores[i].osr_score >= 1.0 / 7.0 - 1e-12);
                CHECK(scores[i].osr_score <= 1.0);
            }
        }
        // Classification comes from the class head regardless of scorer.
        std::vector<int> preds;
        for (const auto& s : scores) preds.push_back(s.predicted_class);
        if (predicted.empty()) {
            predicted = preds;
        } else {
            CHECK(preds == predicted);
        }
    }

    // Deterministic scorers give identical lists on a second pass.
    EvalBatchStream s1(split, SplitPart::test_closed, 5);
    EvalBatchStream s2(split, SplitPart::test_closed, 5);
    const auto a = score_split(model, s1, ScorerId::t3po);
    const auto b = score_split(model, s2, ScorerId::t3po);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].osr_score == b[i].osr_score);
}

TEST_CASE("score csv round trips") {
    const TwoHeadModel model = tiny_model(0.0);
    std::vector<ScoredPrediction> scores(2);
    scores[0].path = "x/1.ppm";
    scores[0].true_class = "a";
    scores[0].predicted_class = 1;
    scores[0].osr_score = 0.625;
    scores[0].scorer = ScorerId::msp;
    scores[1].path = "y/2.ppm";
    scores[1].true_class = "OPEN";
    scores[1].predicted_class = 0;
    scores[1].osr_score = -1.5;
    scores[1].scorer = ScorerId::msp;
    save_scores(scores, model, 42, "tmp_scores.csv");
    const auto records = load_scores("tmp_scores.csv");
    REQUIRE(records.size() == 2);
    CHECK(records[0].path == "x/1.ppm");
    CHECK(records[0].true_class == "a");
    CHECK(records[0].predicted_class == "b");
    CHECK(records[0].osr_score == 0.625);
    CHECK(records[0].scorer_id == "msp");
    CHECK(records[0].seed == 42);
    CHECK(records[1].true_class == "OPEN");
    CHECK(records[1].osr_score == -1.5);
}
