#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include "json.hpp"

#include "t3po/runner.hpp"

using namespace t3po;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv{"t3po"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

// One tiny self-contained experiment sandbox per test binary run.
struct Sandbox {
    fs::path root = "tmp_runner";

    Sandbox() {
        fs::remove_all(root);
        fs::create_directories(root);
        REQUIRE(cli({"synth", "--out", (root / "data").string(), "--n-per-class", "24",
                     "--tile-side", "16", "--seed", "1"}) == kExitOk);
        write_split_config();
        write_experiment_config();
    }

    fs::path split_config_path() const { return root / "split.json"; }
    fs::path config_path() const { return root / "exp.json"; }
    fs::path manifest_path() const { return root / "out" / "split_manifest.csv"; }

    void write_split_config(const std::vector<std::string>& open = {"graynoise"}) const {
        json j;
        j["dataset"] = "synthetic";
        j["name"] = "S1";
        j["alias"] = "Split 0";
        j["closed_classes"] = {"blobs", "checker", "stripes"};
        j["open_classes"] = open;
        j["seed"] = 3;
        std::ofstream(split_config_path()) << j.dump(2);
    }

    void write_experiment_config(double base_lr = 0.01, int epochs = 2) const {
        json j;
        j["profile"] = "desk";
        j["dataset_root"] = (root / "data").string();
        j["split_config"] = split_config_path().string();
        j["backbone"] = "micro2";
        j["tile_side"] = 16;
        j["train"] = {{"batch_size", 8},
                      {"base_lr", base_lr},
                      {"epochs", epochs},
                      {"lambda", 1.0},
                      {"dropout_rate", 0.2}};
        j["seeds"] = {0};
        j["mc_passes"] = 4;
        j["out_dir"] = (root / "out").string();
        std::ofstream(config_path()) << j.dump(2);
    }
};

}  // namespace

TEST_CASE("experiment config applies profile defaults") {
    Sandbox box;
    const ExperimentConfig cfg = load_experiment_config(box.config_path());
    CHECK(cfg.backbone == "micro2");
    CHECK(cfg.train.epochs == 2);
    CHECK(cfg.train.batch_size == 8);
    CHECK(cfg.scorers.size() == 4);  // full scorer list by default
    CHECK(cfg.seeds == std::vector<uint64_t>{0});
    CHECK(cfg.split.split_id() == "synthetic/S1");
    CHECK(cfg.manifest_path == box.manifest_path());
}

TEST_CASE("config hash tracks semantic fields only") {
    Sandbox box;
    const ExperimentConfig base = load_experiment_config(box.config_path());
    const std::string h0 = config_hash(base);

    ExperimentConfig changed = base;
    changed.train.epochs = 7;
    CHECK(config_hash(changed) != h0);

    changed = base;
    changed.train.lambda = 0.5;
    CHECK(config_hash(changed) != h0);

    changed = base;
    changed.split.seed = 99;
    CHECK(config_hash(changed) != h0);

    changed = base;
    changed.out_dir = "somewhere/else";
    changed.seeds = {5, 6, 7};
    changed.scorers = {ScorerId::msp};
    changed.mc_passes = 64;
    CHECK(config_hash(changed) == h0);
}

TEST_CASE("full desk pipeline: make-splits, train, score, report") {
    Sandbox box;

    // make-splits writes the manifest with the configured partitions.
    REQUIRE(cli({"make-splits", "--config", box.config_path().string()}) == kExitOk);
    const SplitAssignment manifest = load_manifest(box.manifest_path());
    CHECK(manifest.closed_classes == std::vector<std::string>{"blobs", "checker", "stripes"});
    CHECK(manifest.open_classes == std::vector<std::string>{"graynoise"});
    // 24 tiles per class: 16 train, 3 val, 5 test.
    CHECK(manifest.train.size() == 48);
    CHECK(manifest.val.size() == 9);
    CHECK(manifest.test_closed.size() == 15);
    CHECK(manifest.test_open.size() == 24);

    // train produces a checkpoint, a log row per epoch, and provenance.
    REQUIRE(cli({"train", "--config", box.config_path().string(), "--seed", "0"}) == kExitOk);
    const ExperimentConfig cfg = load_experiment_config(box.config_path());
    const fs::path run_dir = seed_dir(cfg, 0);
    CHECK(fs::exists(run_dir / "checkpoint.t3po"));
    CHECK(fs::exists(run_dir / "run_meta.json"));
    CHECK(fs::exists(experiment_dir(cfg) / "config.json"));
    {
        std::ifstream log(run_dir / "train_log.csv");
        std::string line;
        int rows = -1;  // header
        while (std::getline(log, line)) {
            if (!line.empty()) ++rows;
        }
        CHECK(rows == 2);  // one per epoch
    }

    // Rerunning the same seed refuses without --overwrite.
    CHECK(cli({"train", "--config", box.config_path().string(), "--seed", "0"}) == kExitData);
    CHECK(cli({"train", "--config", box.config_path().string(), "--seed", "0", "--overwrite"}) ==
          kExitOk);

    // score covers test_closed plus test_open, reproducibly for mcdropout.
    const std::string ckpt = (run_dir / "checkpoint.t3po").string();
    const std::string man = box.manifest_path().string();
    REQUIRE(cli({"score", "--checkpoint", ckpt, "--manifest", man, "--scorer", "t3po"}) ==
            kExitOk);
    const auto records = load_scores(run_dir / "scores_t3po.csv");
    CHECK(records.size() == manifest.test_closed.size() + manifest.test_open.size());

    REQUIRE(cli({"score", "--checkpoint", ckpt, "--manifest", man, "--scorer", "mcdropout",
                 "--seed", "5", "--mc-passes", "4"}) == kExitOk);
    std::ifstream first(run_dir / "scores_mcdropout.csv");
    std::stringstream buf1;
    buf1 << first.rdbuf();
    REQUIRE(cli({"score", "--checkpoint", ckpt, "--manifest", man, "--scorer", "mcdropout",
                 "--seed", "5", "--mc-passes", "4"}) == kExitOk);
    std::ifstream second(run_dir / "scores_mcdropout.csv");
    std::stringstream buf2;
    buf2 << second.rdbuf();
    CHECK(buf1.str() == buf2.str());

    // Unsupported scorer is an explicit non-goal with its own exit code.
    CHECK(cli({"score", "--checkpoint", ckpt, "--manifest", man, "--scorer", "arpl"}) ==
          kExitUnsupported);

    // Duplicating the seed's scores across ten seed dirs yields zero-width
    // confidence intervals in the report.
    for (int s = 1; s < 10; ++s) {
        const fs::path dir = experiment_dir(cfg) / std::to_string(s);
        fs::create_directories(dir);
        fs::copy_file(run_dir / "scores_t3po.csv", dir / "scores_t3po.csv",
                      fs::copy_options::overwrite_existing);
    }
    REQUIRE(cli({"report", "--experiment-dir", (box.root / "out").string(), "--out",
                 (box.root / "report").string()}) == kExitOk);
    std::ifstream agg(box.root / "report" / "aggregates.csv");
    std::string header, row;
    std::getline(agg, header);
    CHECK(header == "split,scorer,n_runs,seeds,mean_acc,ci95_acc,mean_auc,ci95_auc");
    bool found_t3po = false;
    while (std::getline(agg, row)) {
        if (row.find(",t3po,") == std::string::npos) continue;
        found_t3po = true;
        CHECK(row.find("synthetic/S1,t3po,10,") != std::string::npos);
        std::stringstream ss(row);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        REQUIRE(fields.size() == 8);
        CHECK(std::stod(fields[5]) == 0.0);  // ci95_acc
        CHECK(std::stod(fields[7]) == 0.0);  // ci95_auc
    }
    CHECK(found_t3po);
    CHECK(fs::exists(box.root / "report" / "report.md"));

    // The report names its sources with content hashes.
    std::ifstream md(box.root / "report" / "report.md");
    std::stringstream mdbuf;
    mdbuf << md.rdbuf();
    CHECK(mdbuf.str().find("scores_t3po.csv") != std::string::npos);
    CHECK(mdbuf.str().find("fnv1a64:") != std::string::npos);
}

TEST_CASE("empty open set produces an empty test_open manifest section") {
    Sandbox box;
    box.write_split_config({});
    REQUIRE(cli({"make-splits", "--config", box.config_path().string()}) == kExitOk);
    const SplitAssignment manifest = load_manifest(box.manifest_path());
    CHECK(manifest.test_open.empty());
    CHECK(manifest.open_classes.empty());
}

TEST_CASE("missing classes fail with exit code 2 and name the class") {
    Sandbox box;
    box.write_split_config({"no_such_tissue"});
    CHECK(cli({"make-splits", "--config", box.config_path().string()}) == kExitData);
}

TEST_CASE("class-order mismatch between checkpoint and manifest is exit 4") {
    Sandbox box;
    REQUIRE(cli({"make-splits", "--config", box.config_path().string()}) == kExitOk);
    REQUIRE(cli({"train", "--config", box.config_path().string(), "--seed", "0"}) == kExitOk);
    const ExperimentConfig cfg = load_experiment_config(box.config_path());
    const std::string ckpt = (seed_dir(cfg, 0) / "checkpoint.t3po").string();

    // Rebuild the manifest with a different closed-class order.
    json j;
    j["dataset"] = "synthetic";
    j["name"] = "S1";
    j["closed_classes"] = {"stripes", "blobs", "checker"};
    j["open_classes"] = {"graynoise"};
    j["seed"] = 3;
    std::ofstream(box.split_config_path()) << j.dump(2);
    REQUIRE(cli({"make-splits", "--config", box.config_path().string()}) == kExitOk);

    CHECK(cli({"score", "--checkpoint", ckpt, "--manifest", box.manifest_path().string(),
               "--scorer", "t3po"}) == kExitConsistency);
}

TEST_CASE("non-finite training loss maps to exit 3") {
    Sandbox box;
    box.write_experiment_config(/*base_lr=*/1e200, /*epochs=*/3);
    {
        // micro2's normalization keeps exploded activations finite; the
        // un-normalized backbone overflows as intended.
        std::ifstream in(box.config_path());
        json j;
        in >> j;
        j["backbone"] = "small4";
        std::ofstream(box.config_path()) << j.dump(2);
    }
    REQUIRE(cli({"make-splits", "--config", box.config_path().string()}) == kExitOk);
    CHECK(cli({"train", "--config", box.config_path().string(), "--seed", "0"}) ==
          kExitTraining);
}

TEST_CASE("unknown subcommands and bad flags exit with the data code") {
    CHECK(cli({"frobnicate"}) == kExitData);
    CHECK(cli({"train"}) == kExitData);  // missing required flags
}

TEST_CASE("shipped split configs carry the documented memberships") {
    const char* env = std::getenv("T3PO_CONFIG_DIR");
    REQUIRE(env != nullptr);
    const fs::path splits = fs::path(env) / "splits";

    const SplitConfig k5s1 = load_split_config(splits / "kather5k_s1.json");
    CHECK(k5s1.closed_classes.size() == 5);
    CHECK(k5s1.open_classes.size() == 3);
    CHECK(k5s1.split_id() == "kather5k/S1");
    CHECK(k5s1.fractions == std::array<double, 3>{0.7, 0.15, 0.15});

    // S3 moves the lymphocyte class into the closed set relative to S2.
    const SplitConfig k5s2 = load_split_config(splits / "kather5k_s2.json");
    const SplitConfig k5s3 = load_split_config(splits / "kather5k_s3.json");
    CHECK(k5s2.closed_classes.size() == 3);
    CHECK(k5s3.closed_classes.size() == 4);
    CHECK(std::count(k5s3.closed_classes.begin(), k5s3.closed_classes.end(), "04_LYMPHO") == 1);
    CHECK(std::count(k5s2.open_classes.begin(), k5s2.open_classes.end(), "04_LYMPHO") == 1);

    // Kather-100k S3 moves muscle into the closed set relative to S2.
    const SplitConfig k100s2 = load_split_config(splits / "kather100k_s2.json");
    const SplitConfig k100s3 = load_split_config(splits / "kather100k_s3.json");
    CHECK(std::count(k100s2.open_classes.begin(), k100s2.open_classes.end(), "MUS") == 1);
    CHECK(std::count(k100s3.closed_classes.begin(), k100s3.closed_classes.end(), "MUS") == 1);
    for (const auto& cfg : {k5s1, k5s2, k5s3, k100s2, k100s3}) {
        for (const auto& c : cfg.closed_classes) {
            CHECK(std::count(cfg.open_classes.begin(), cfg.open_classes.end(), c) == 0);
        }
    }
}
