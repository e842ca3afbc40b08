#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>

#include "t3po/errors.hpp"
#include "t3po/nnet.hpp"
#include "t3po/transforms.hpp"

using namespace t3po;

namespace {

ImageTile colored_noise(Rng& rng, int side, int hot_channel) {
    ImageTile tile(side, side);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            for (int c = 0; c < 3; ++c) {
                const uint64_t lo = c == hot_channel ? 150 : 0;
                const uint64_t hi = c == hot_channel ? 255 : 100;
                tile.at(x, y, c) = static_cast<uint8_t>(lo + rng.uniform_int(hi - lo + 1));
            }
        }
    }
    return tile;
}

// Two color classes with real appearance transforms applied, so both
// heads have something consistent to learn.
std::shared_ptr<std::vector<TrainSample>> make_memory_trainset(int n, int side, uint64_t seed) {
    auto data = std::make_shared<std::vector<TrainSample>>();
    Rng rng(seed);
    const auto space = TransformSpace::standard();
    for (int i = 0; i < n; ++i) {
        const int cls = i % 2;
        const ImageTile base = colored_noise(rng, side, cls == 0 ? 0 : 2);
        const TransformSpec app = sample_transform(rng, space, TransformFamily::appearance);
        TrainSample s;
        s.tile = apply_appearance(base, app);
        s.class_label = cls;
        s.xform_label = transform_label(app);
        data->push_back(std::move(s));
    }
    return data;
}

TrainEpochFactory memory_epochs(std::shared_ptr<std::vector<TrainSample>> data, size_t batch) {
    return [data, batch](int) -> TrainBatchFn {
        auto cursor = std::make_shared<size_t>(0);
        return [data, batch, cursor](TrainBatch& out) {
            out.samples.clear();
            while (*cursor < data->size() && out.samples.size() < batch) {
                out.samples.push_back((*data)[(*cursor)++]);
            }
            return !out.samples.empty();
        };
    };
}

EvalStreamFactory memory_eval(std::shared_ptr<std::vector<TrainSample>> data, size_t batch) {
    return [data, batch]() -> EvalBatchFn {
        auto cursor = std::make_shared<size_t>(0);
        return [data, batch, cursor](EvalBatch& out) {
            out.tiles.clear();
            out.labels.clear();
            out.paths.clear();
            while (*cursor < data->size() && out.tiles.size() < batch) {
                out.tiles.push_back((*data)[*cursor].tile);
                out.labels.push_back((*data)[*cursor].class_label);
                out.paths.push_back("mem/" + std::to_string(*cursor));
                ++(*cursor);
            }
            return !out.tiles.empty();
        };
    };
}

TwoHeadModel micro_model(int n_classes, double dropout = 0.0, uint64_t seed = 7) {
    return TwoHeadModel(BackboneSpec{"micro2", false}, n_classes,
                        std::vector<std::string>(static_cast<size_t>(n_classes), "c"), dropout,
                        seed);
}

}  // namespace

TEST_CASE("cyclical schedule descends linearly and resets") {
    CHECK(cyclical_lr(0, 1000, 0.01) == 0.01);
    CHECK(cyclical_lr(999, 1000, 0.01) == doctest::Approx(0.0001).epsilon(1e-12));
    CHECK(cyclical_lr(1000, 1000, 0.01) == 0.01);
    CHECK(cyclical_lr(500, 1000, 0.01) ==
          doctest::Approx(0.01 + (0.0001 - 0.01) * 500.0 / 999.0));
    CHECK(cyclical_lr(5, 1, 0.01) == 0.01);  // degenerate cycle
}

TEST_CASE("micro backbone stays under the gradient-check parameter budget") {
    const TwoHeadModel model = micro_model(3);
    CHECK(model.params().size() < 1000);
    CHECK(model.rep_dim() == 8);
}

TEST_CASE("forward rows are simplex and duplicated inputs give identical rows") {
    Rng rng(3);
    const ImageTile a = colored_noise(rng, 16, 0);
    const ImageTile b = colored_noise(rng, 16, 2);
    const TwoHeadModel model = micro_model(4);
    const std::vector<ImageTile> tiles{a, b, a};
    const BatchOutput out = model.forward(tiles);
    REQUIRE(out.batch == 3);
    for (size_t i = 0; i < out.batch; ++i) {
        const auto cp = out.class_prob_row(i);
        const auto xp = out.xform_prob_row(i);
        CHECK(std::fabs(std::accumulate(cp.begin(), cp.end(), 0.0) - 1.0) < 1e-6);
        CHECK(std::fabs(std::accumulate(xp.begin(), xp.end(), 0.0) - 1.0) < 1e-6);
        for (double p : cp) CHECK(p >= 0.0);
    }
    for (int k = 0; k < 4; ++k) {
        CHECK(out.class_logit_row(0)[static_cast<size_t>(k)] ==
              out.class_logit_row(2)[static_cast<size_t>(k)]);
    }
}

TEST_CASE("zero weights produce uniform probabilities") {
    TwoHeadModel model = micro_model(5);
    std::fill(model.params().begin(), model.params().end(), 0.0);
    Rng rng(4);
    const std::vector<ImageTile> tiles{colored_noise(rng, 16, 1)};
    const BatchOutput out = model.forward(tiles);
    for (double p : out.class_prob_row(0)) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
    for (double p : out.xform_prob_row(0)) {
        CHECK(p == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    }
}

TEST_CASE("joint loss analytic values") {
    SUBCASE("uniform logits give ln N + lambda ln 7") {
        const std::vector<double> cl(5, 0.0);
        const std::vector<double> xl(7, 0.0);
        const std::vector<int> y{0};
        const std::vector<int> t{3};
        const double loss = joint_loss(cl, y, 5, xl, t, 1.0);
        CHECK(loss == doctest::Approx(std::log(5.0) + std::log(7.0)).epsilon(1e-12));
        CHECK(loss == doctest::Approx(3.5553).epsilon(1e-4));
    }
    SUBCASE("confident correct logits drive the loss to zero") {
        std::vector<double> cl(3, 0.0);
        std::vector<double> xl(7, 0.0);
        cl[1] = 50.0;
        xl[6] = 50.0;
        const std::vector<int> y{1};
        const std::vector<int> t{6};
        CHECK(joint_loss(cl, y, 3, xl, t, 1.0) < 1e-12);
    }
    SUBCASE("labels out of range are rejected") {
        const std::vector<double> cl(3, 0.0);
        const std::vector<double> xl(7, 0.0);
        CHECK_THROWS(joint_loss(cl, std::vector<int>{3}, 3, xl, std::vector<int>{0}, 1.0));
        CHECK_THROWS(joint_loss(cl, std::vector<int>{0}, 3, xl, std::vector<int>{7}, 1.0));
    }
}

TEST_CASE("analytic gradients match central finite differences") {
    TwoHeadModel model = micro_model(3, /*dropout=*/0.0);
    auto data = make_memory_trainset(4, 16, 11);
    TrainBatch batch;
    batch.samples = *data;

    const double lambda = 0.7;
    std::vector<double> grad(model.params().size(), 0.0);
    model.loss_and_grad(batch, lambda, nullptr, grad);

    Rng rng(99);
    double worst = 0.0;
    for (int probe = 0; probe < 100; ++probe) {
        const size_t i = rng.uniform_int(model.params().size());
        const double theta = model.params()[i];
        const double h = 1e-5 * std::max(1.0, std::fabs(theta));
        model.params()[i] = theta + h;
        const auto [lcp, lxp] = model.loss_only(batch);
        model.params()[i] = theta - h;
        const auto [lcm, lxm] = model.loss_only(batch);
        model.params()[i] = theta;
        const double fd = ((lcp + lambda * lxp) - (lcm + lambda * lxm)) / (2.0 * h);
        const double rel = std::fabs(fd - grad[i]) /
                           std::max({std::fabs(fd), std::fabs(grad[i]), 1e-8});
        worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("lambda zero silences the transform pathway exactly") {
    TwoHeadModel model = micro_model(2);
    auto data = make_memory_trainset(6, 16, 13);
    TrainBatch batch;
    batch.samples = *data;

    std::vector<double> grad(model.params().size(), 0.0);
    model.loss_and_grad(batch, 0.0, nullptr, grad);

    const auto layout = model.param_layout();
    for (size_t i = layout.xform_w; i < layout.total; ++i) {
        CHECK(grad[i] == 0.0);
    }
    double class_head_norm = 0.0;
    for (size_t i = layout.class_w; i < layout.xform_w; ++i) {
        class_head_norm += std::fabs(grad[i]);
    }
    CHECK(class_head_norm > 0.0);
}

TEST_CASE("fit keeps the earliest checkpoint under ties") {
    auto data = make_memory_trainset(8, 16, 21);
    TwoHeadModel model = micro_model(2);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.base_lr = 0.0;  // no updates, so every epoch evaluates identically
    cfg.dropout_rate = 0.0;
    cfg.seed = 1;
    const FitResult result = fit(model, memory_epochs(data, 8), memory_eval(data, 8), cfg, 1);
    CHECK(result.best.epoch == 1);
    CHECK(result.log.size() == 4);
    for (const EpochLog& row : result.log) CHECK(row.val_acc == result.log.front().val_acc);
}

TEST_CASE("fit is deterministic for a fixed seed") {
    auto data = make_memory_trainset(12, 16, 31);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.base_lr = 0.005;
    cfg.dropout_rate = 0.2;
    cfg.seed = 9;

    auto run = [&]() {
        TwoHeadModel model = micro_model(2, cfg.dropout_rate, 55);
        return fit(model, memory_epochs(data, cfg.batch_size), memory_eval(data, 12), cfg, 3);
    };
    const FitResult a = run();
    const FitResult b = run();
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss_class == b.log[i].loss_class);
        CHECK(a.log[i].loss_xform == b.log[i].loss_xform);
        CHECK(a.log[i].val_acc == b.log[i].val_acc);
        CHECK(a.log[i].lr == b.log[i].lr);
    }
    CHECK(a.best.params == b.best.params);
}

TEST_CASE("a 32-sample memorization task collapses the loss") {
    // Class = hot color channel, pretext target = one of 7 luminance
    // levels; both heads have a clean signal to overfit.
    auto data = std::make_shared<std::vector<TrainSample>>();
    Rng rng(41);
    for (int i = 0; i < 32; ++i) {
        const int cls = i % 2;
        const int level = i % 7;
        ImageTile tile(16, 16);
        for (int y = 0; y < 16; ++y) {
            for (int x = 0; x < 16; ++x) {
                for (int c = 0; c < 3; ++c) {
                    const int base = (c == (cls == 0 ? 0 : 2) ? 120 : 20) + 16 * level;
                    tile.at(x, y, c) = static_cast<uint8_t>(
                        base + static_cast<int>(rng.uniform_int(17)) - 8);
                }
            }
        }
        data->push_back(TrainSample{std::move(tile), cls, level});
    }

    TwoHeadModel model(BackboneSpec{"small4", false}, 2, {"a", "b"}, 0.0, 3);
    TrainBatch all;
    all.samples = *data;
    const auto [ilc, ilx] = model.loss_only(all);
    const double initial = ilc + ilx;

    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 4;
    cfg.base_lr = 0.003;
    cfg.dropout_rate = 0.0;
    cfg.seed = 2;
    fit(model, memory_epochs(data, cfg.batch_size), memory_eval(data, 32), cfg, 8);

    const auto [flc, flx] = model.loss_only(all);
    const double final_loss = flc + flx;
    INFO("initial ", initial, " final ", final_loss);
    CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("reported best accuracy re-evaluates exactly from the checkpoint") {
    auto data = make_memory_trainset(16, 16, 61);
    TwoHeadModel model = micro_model(2, 0.1, 17);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.base_lr = 0.01;
    cfg.dropout_rate = 0.1;
    cfg.seed = 3;
    const FitResult result =
        fit(model, memory_epochs(data, cfg.batch_size), memory_eval(data, 16), cfg, 4);

    const TwoHeadModel restored = model_from_checkpoint(result.best);
    const double reval = evaluate_accuracy(restored, memory_eval(data, 16)());
    CHECK(reval == result.best.val_acc);
}

TEST_CASE("checkpoints survive a save/load round trip") {
    auto data = make_memory_trainset(8, 16, 71);
    TwoHeadModel model = micro_model(2, 0.0, 19);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.base_lr = 0.01;
    cfg.dropout_rate = 0.0;
    cfg.seed = 4;
    FitResult result = fit(model, memory_epochs(data, 8), memory_eval(data, 8), cfg, 1);
    result.best.config_hash = "deadbeef";
    save_checkpoint(result.best, "tmp_ckpt.t3po");
    const Checkpoint loaded = load_checkpoint("tmp_ckpt.t3po");
    CHECK(loaded.arch == "micro2");
    CHECK(loaded.n_classes == 2);
    CHECK(loaded.epoch == result.best.epoch);
    CHECK(loaded.val_acc == result.best.val_acc);
    CHECK(loaded.config_hash == "deadbeef");
    CHECK(loaded.params == result.best.params);
}

TEST_CASE("non-finite loss aborts with epoch and batch context") {
    auto data = make_memory_trainset(8, 16, 81);
    // The un-normalized backbone: micro2's normalization keeps even
    // exploded activations finite.
    TwoHeadModel model(BackboneSpec{"small4", false}, 2, {"a", "b"}, 0.0, 23);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.base_lr = 1e200;  // drives parameters to overflow
    cfg.dropout_rate = 0.0;
    cfg.seed = 5;
    try {
        fit(model, memory_epochs(data, cfg.batch_size), memory_eval(data, 8), cfg, 2);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.epoch >= 1);
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
}

TEST_CASE("training log csv has one row per epoch") {
    const std::vector<EpochLog> log{{1, 0.01, 2.0, 1.9, 0.5}};
    save_training_log(log, "tmp_log.csv");
    std::ifstream in("tmp_log.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,lr,loss_class,loss_xform,val_acc");
    int rows = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 1);
}
