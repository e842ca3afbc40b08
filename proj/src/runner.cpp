#include "t3po/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "t3po/errors.hpp"
#include "t3po/hash.hpp"
#include "t3po/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace t3po {

namespace {

int default_tile_side(const std::string& profile, const std::string& dataset) {
    if (profile == "desk") return 32;
    if (dataset == "kather5k") return 150;
    if (dataset == "kather100k") return 224;
    return 0;  // must be set explicitly
}

void apply_profile_defaults(ExperimentConfig& cfg) {
    if (cfg.profile == "desk") {
        cfg.backbone = cfg.backbone.empty() ? "small4" : cfg.backbone;
        if (cfg.train.epochs == 0) cfg.train.epochs = 15;
        if (cfg.train.batch_size == 0) cfg.train.batch_size = 16;
        if (cfg.seeds.empty()) cfg.seeds = {0, 1, 2};
    } else if (cfg.profile == "paper") {
        cfg.backbone = cfg.backbone.empty() ? "mobile" : cfg.backbone;
        if (cfg.train.epochs == 0) {
            cfg.train.epochs = cfg.split.dataset == "kather100k" ? 20 : 200;
        }
        if (cfg.train.batch_size == 0) cfg.train.batch_size = 128;
        if (cfg.seeds.empty()) {
            for (uint64_t s = 0; s < 10; ++s) cfg.seeds.push_back(s);
        }
    } else {
        throw DataError("unknown profile '" + cfg.profile + "' (expected desk or paper)");
    }
    if (cfg.tile_side == 0) cfg.tile_side = default_tile_side(cfg.profile, cfg.split.dataset);
    if (cfg.tile_side == 0) {
        throw DataError("tile_side must be set for dataset '" + cfg.split.dataset + "'");
    }
    if (cfg.scorers.empty()) {
        cfg.scorers = {ScorerId::t3po, ScorerId::msp, ScorerId::maxlogit, ScorerId::mcdropout};
    }
}

}  // namespace

ExperimentConfig load_experiment_config(const fs::path& file, const std::string& profile_override) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot open experiment config " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError("experiment config " + file.string() + ": " + e.what());
    }

    ExperimentConfig cfg;
    try {
        cfg.profile = j.value("profile", "desk");
        if (!profile_override.empty()) cfg.profile = profile_override;
        cfg.dataset_root = j.at("dataset_root").get<std::string>();
        cfg.split_config_path = j.at("split_config").get<std::string>();
        cfg.backbone = j.value("backbone", "");
        cfg.pretrained = j.value("pretrained", cfg.profile == "paper");
        cfg.tile_side = j.value("tile_side", 0);
        cfg.out_dir = j.value("out_dir", std::string("out"));
        if (j.contains("manifest")) cfg.manifest_path = j.at("manifest").get<std::string>();
        if (j.contains("train")) {
            const json& t = j.at("train");
            cfg.train.batch_size = t.value("batch_size", size_t{0});
            cfg.train.base_lr = t.value("base_lr", 0.01);
            cfg.train.epochs = t.value("epochs", 0);
            cfg.train.lambda = t.value("lambda", 1.0);
            cfg.train.dropout_rate = t.value("dropout_rate", 0.2);
        }
        if (j.contains("scorers")) {
            for (const auto& name : j.at("scorers")) {
                const auto id = scorer_from_name(name.get<std::string>());
                if (!id) {
                    throw UnsupportedError("unsupported scorer '" + name.get<std::string>() + "'");
                }
                cfg.scorers.push_back(*id);
            }
        }
        if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        cfg.mc_passes = j.value("mc_passes", 32);
    } catch (const json::exception& e) {
        throw DataError("experiment config " + file.string() + ": " + e.what());
    }

    if (const char* env_root = std::getenv("T3PO_DATA_ROOT"); env_root && *env_root) {
        cfg.dataset_root = env_root;
    }
    // Split config path is taken relative to the experiment config file.
    if (cfg.split_config_path.is_relative()) {
        const fs::path beside = file.parent_path() / cfg.split_config_path;
        if (fs::exists(beside)) cfg.split_config_path = beside;
    }
    cfg.split = load_split_config(cfg.split_config_path);
    apply_profile_defaults(cfg);
    if (cfg.manifest_path.empty()) cfg.manifest_path = cfg.out_dir / "split_manifest.csv";

    if (cfg.seeds.empty()) throw DataError("experiment needs at least one seed");
    std::vector<uint64_t> sorted = cfg.seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw DataError("experiment seeds must be distinct");
    }
    return cfg;
}

namespace {

json semantic_json(const ExperimentConfig& cfg) {
    json split;
    split["dataset"] = cfg.split.dataset;
    split["name"] = cfg.split.name;
    split["closed_classes"] = cfg.split.closed_classes;
    split["open_classes"] = cfg.split.open_classes;
    split["fractions"] = {cfg.split.fractions[0], cfg.split.fractions[1], cfg.split.fractions[2]};
    split["seed"] = cfg.split.seed;
    if (cfg.split.open_test_cap) split["open_test_cap"] = *cfg.split.open_test_cap;

    json j;
    j["profile"] = cfg.profile;
    j["dataset_root"] = cfg.dataset_root.string();
    j["backbone"] = cfg.backbone;
    j["pretrained"] = cfg.pretrained;
    j["tile_side"] = cfg.tile_side;
    j["split"] = split;
    j["train"] = {{"batch_size", cfg.train.batch_size},
                  {"base_lr", cfg.train.base_lr},
                  {"epochs", cfg.train.epochs},
                  {"lambda", cfg.train.lambda},
                  {"dropout_rate", cfg.train.dropout_rate},
                  {"adam_beta1", cfg.train.adam_beta1},
                  {"adam_beta2", cfg.train.adam_beta2},
                  {"adam_eps", cfg.train.adam_eps}};
    return j;
}

}  // namespace

std::string config_hash(const ExperimentConfig& cfg) {
    // nlohmann::json orders object keys, so dump() is canonical.
    return to_hex(fnv1a64(semantic_json(cfg).dump()));
}

fs::path experiment_dir(const ExperimentConfig& cfg) { return cfg.out_dir / config_hash(cfg); }

fs::path seed_dir(const ExperimentConfig& cfg, uint64_t seed) {
    return experiment_dir(cfg) / std::to_string(seed);
}

namespace {

void dump_resolved_config(const ExperimentConfig& cfg, const fs::path& dir) {
    json j = semantic_json(cfg);
    j["config_hash"] = config_hash(cfg);
    j["out_dir"] = cfg.out_dir.string();
    j["manifest"] = cfg.manifest_path.string();
    j["split_config"] = cfg.split_config_path.string();
    j["mc_passes"] = cfg.mc_passes;
    std::vector<std::string> scorer_names;
    for (ScorerId s : cfg.scorers) scorer_names.emplace_back(scorer_name(s));
    j["scorers"] = scorer_names;
    j["seeds"] = cfg.seeds;
    j["split_id"] = cfg.split.split_id();
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "config.json").string());
    out << j.dump(2) << "\n";
}

SplitAssignment load_manifest_with_root(const fs::path& manifest_file) {
    SplitAssignment assignment = load_manifest(manifest_file);
    if (const char* env_root = std::getenv("T3PO_DATA_ROOT"); env_root && *env_root) {
        assignment.root = env_root;
    }
    return assignment;
}

}  // namespace

int cmd_make_splits(const ExperimentConfig& cfg, const fs::path& out_override) {
    const DatasetIndex index = scan_dataset(cfg.dataset_root, cfg.tile_side);
    for (const std::string& w : index.warnings) {
        std::cerr << "warning: " << w << "\n";
    }
    const SplitAssignment assignment = build_split(index, cfg.split);
    const fs::path out = out_override.empty() ? cfg.manifest_path : out_override;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_manifest(assignment, out);
    std::cout << "wrote " << out.string() << " (" << assignment.train.size() << " train, "
              << assignment.val.size() << " val, " << assignment.test_closed.size()
              << " test_closed, " << assignment.test_open.size() << " test_open)\n";
    return kExitOk;
}

int cmd_train(const ExperimentConfig& cfg, uint64_t seed, bool overwrite) {
    if (!fs::exists(cfg.manifest_path)) {
        throw DataError("manifest " + cfg.manifest_path.string() +
                        " not found; run `t3po make-splits` first");
    }
    const SplitAssignment assignment = load_manifest_with_root(cfg.manifest_path);
    const fs::path dir = seed_dir(cfg, seed);
    const fs::path ckpt_file = dir / "checkpoint.t3po";
    if (fs::exists(ckpt_file) && !overwrite) {
        throw DataError("checkpoint " + ckpt_file.string() +
                        " already exists (use --overwrite to redo this seed)");
    }
    fs::create_directories(dir);
    dump_resolved_config(cfg, experiment_dir(cfg));

    TrainConfig tc = cfg.train;
    tc.seed = seed;

    BackboneSpec backbone{cfg.backbone, cfg.pretrained};
    TwoHeadModel model(backbone, static_cast<int>(assignment.closed_classes.size()),
                       assignment.closed_classes, tc.dropout_rate, mix_seed(seed, "model"));

    const auto space = std::make_shared<TransformSpace>(TransformSpace::standard());
    const size_t steps_per_epoch =
        (assignment.train.size() + tc.batch_size - 1) / tc.batch_size;

    TrainEpochFactory train_epochs = [&assignment, space, &tc, seed](int epoch) -> TrainBatchFn {
        auto stream = std::make_shared<TrainBatchStream>(assignment, *space, tc.batch_size, seed,
                                                         epoch);
        return [stream, space](TrainBatch& b) { return stream->next(b); };
    };
    EvalStreamFactory val_stream = [&assignment, &tc]() -> EvalBatchFn {
        auto stream =
            std::make_shared<EvalBatchStream>(assignment, SplitPart::val, tc.batch_size);
        return [stream](EvalBatch& b) { return stream->next(b); };
    };

    FitResult result = fit(model, train_epochs, val_stream, tc, steps_per_epoch);
    result.best.config_hash = config_hash(cfg);
    save_checkpoint(result.best, ckpt_file);
    save_training_log(result.log, dir / "train_log.csv");

    json meta;
    meta["config_hash"] = config_hash(cfg);
    meta["seed"] = seed;
    meta["best_epoch"] = result.best.epoch;
    meta["best_val_acc"] = result.best.val_acc;
    meta["compiler"] = __VERSION__;
    meta["pointer_bits"] = 8 * sizeof(void*);
    std::ofstream meta_out(dir / "run_meta.json", std::ios::trunc);
    meta_out << meta.dump(2) << "\n";

    std::cout << "seed " << seed << ": best val acc " << result.best.val_acc << " at epoch "
              << result.best.epoch << ", checkpoint " << ckpt_file.string() << "\n";
    return kExitOk;
}

int cmd_score(const fs::path& checkpoint_file, const fs::path& manifest_file,
              const std::string& scorer, uint64_t seed, const fs::path& out_csv, int mc_passes,
              bool mc_mean_entropies) {
    const auto scorer_id = scorer_from_name(scorer);
    if (!scorer_id) {
        throw UnsupportedError("unsupported scorer '" + scorer + "'");
    }
    const Checkpoint ckpt = load_checkpoint(checkpoint_file);
    const TwoHeadModel model = model_from_checkpoint(ckpt);
    SplitAssignment assignment = load_manifest_with_root(manifest_file);
    if (model.class_names() != assignment.closed_classes) {
        throw ConsistencyError("checkpoint classes do not match manifest closed classes");
    }

    McDropoutParams mc;
    mc.n_passes = mc_passes;
    mc.seed = seed;
    mc.mean_of_entropies = mc_mean_entropies;

    std::vector<ScoredPrediction> all;
    for (SplitPart part : {SplitPart::test_closed, SplitPart::test_open}) {
        EvalBatchStream stream(assignment, part, 64);
        auto scores = score_split(model, stream, *scorer_id, mc);
        all.insert(all.end(), std::make_move_iterator(scores.begin()),
                   std::make_move_iterator(scores.end()));
    }

    fs::path out = out_csv;
    if (out.empty()) {
        out = checkpoint_file.parent_path() / ("scores_" + scorer + ".csv");
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_scores(all, model, seed, out);
    std::cout << "wrote " << out.string() << " (" << all.size() << " tiles)\n";
    return kExitOk;
}

namespace {

struct ReportRun {
    RunResult result;
    fs::path score_file;
};

RunResult run_result_from_scores(const std::vector<ScoreRecord>& records,
                                 const std::string& split_id) {
    if (records.empty()) throw DataError("empty score file");
    RunResult r;
    r.split_id = split_id;
    r.scorer_id = records.front().scorer_id;
    r.seed = records.front().seed;
    std::vector<double> closed_scores;
    std::vector<double> open_scores;
    size_t closed_hits = 0;
    for (const ScoreRecord& rec : records) {
        if (rec.true_class == "OPEN") {
            open_scores.push_back(rec.osr_score);
        } else {
            closed_scores.push_back(rec.osr_score);
            if (rec.predicted_class == rec.true_class) ++closed_hits;
        }
    }
    if (closed_scores.empty()) throw DataError("score file has no closed-set rows");
    r.n_closed_test = closed_scores.size();
    r.n_open_test = open_scores.size();
    r.closed_acc = static_cast<double>(closed_hits) / static_cast<double>(closed_scores.size());
    r.closed_open_auc =
        open_scores.empty() ? std::numeric_limits<double>::quiet_NaN()
                            : auroc(closed_scores, open_scores);
    return r;
}

std::string fmt_pct(double v) {
    if (std::isnan(v)) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

}  // namespace

int cmd_report(const fs::path& experiment_root, const fs::path& out_dir) {
    if (!fs::is_directory(experiment_root)) {
        throw DataError("experiment dir does not exist: " + experiment_root.string());
    }

    // (split, scorer) -> runs; split -> dataset grouping for table layout.
    std::map<std::pair<std::string, std::string>, std::vector<ReportRun>> groups;
    std::map<std::string, std::string> split_alias;

    for (const auto& hash_entry : fs::directory_iterator(experiment_root)) {
        if (!hash_entry.is_directory()) continue;
        const fs::path config_file = hash_entry.path() / "config.json";
        if (!fs::exists(config_file)) continue;
        std::ifstream in(config_file);
        json cj;
        in >> cj;
        const std::string split_id = cj.value("split_id", "?");
        split_alias[split_id] = cj["split"].value("alias", "");
        for (const auto& seed_entry : fs::directory_iterator(hash_entry.path())) {
            if (!seed_entry.is_directory()) continue;
            for (const auto& f : fs::directory_iterator(seed_entry.path())) {
                const std::string name = f.path().filename().string();
                if (name.rfind("scores_", 0) != 0 || f.path().extension() != ".csv") continue;
                const auto records = load_scores(f.path());
                ReportRun run{run_result_from_scores(records, split_id), f.path()};
                groups[{split_id, run.result.scorer_id}].push_back(std::move(run));
            }
        }
    }
    if (groups.empty()) {
        throw DataError("no score files found under " + experiment_root.string());
    }

    fs::create_directories(out_dir);

    // Aggregate per (split, scorer), sorted by seed for stable output.
    std::map<std::string, std::vector<AggregateResult>> by_split;
    std::vector<std::pair<fs::path, uint64_t>> sources;
    std::ofstream csv(out_dir / "aggregates.csv", std::ios::trunc);
    csv << "split,scorer,n_runs,seeds,mean_acc,ci95_acc,mean_auc,ci95_auc\n";
    csv.precision(10);
    for (auto& [key, runs] : groups) {
        std::sort(runs.begin(), runs.end(), [](const ReportRun& a, const ReportRun& b) {
            return a.result.seed < b.result.seed;
        });
        std::vector<RunResult> results;
        for (const ReportRun& r : runs) {
            results.push_back(r.result);
            std::ifstream f(r.score_file, std::ios::binary);
            std::stringstream ss;
            ss << f.rdbuf();
            sources.emplace_back(r.score_file, fnv1a64(ss.str()));
        }
        const AggregateResult agg = aggregate(results);
        by_split[key.first].push_back(agg);
        std::string seed_list;
        for (size_t i = 0; i < agg.seeds.size(); ++i) {
            if (i) seed_list += ";";
            seed_list += std::to_string(agg.seeds[i]);
        }
        csv << key.first << "," << key.second << "," << agg.n_runs << "," << seed_list << ","
            << agg.mean_acc << "," << agg.ci95_acc << "," << agg.mean_auc << "," << agg.ci95_auc
            << "\n";
    }

    std::ofstream md(out_dir / "report.md", std::ios::trunc);
    md << "# Closed-set accuracy and Closed/Open AUC\n\n";
    md << "Mean over aggregated seeds, +- 95% CI half-width. Best per column underlined,\n";
    md << "entries within the best scorer's interval in bold.\n";
    for (const auto& [split_id, aggs] : by_split) {
        md << "\n## " << split_id;
        if (!split_alias[split_id].empty()) md << " (" << split_alias[split_id] << ")";
        md << "\n\n";
        md << "| scorer | seeds | ACC | AUC |\n|---|---|---|---|\n";
        const bool has_auc = std::none_of(aggs.begin(), aggs.end(), [](const AggregateResult& a) {
            return std::isnan(a.mean_auc);
        });
        const BoldMarks acc_marks = bold_rule(aggs, /*by_auc=*/false);
        const BoldMarks auc_marks = has_auc ? bold_rule(aggs, /*by_auc=*/true) : BoldMarks{};
        for (const AggregateResult& a : aggs) {
            auto cell = [&](double mean, double ci, const BoldMarks& marks) {
                std::string text = fmt_pct(mean);
                if (text != "-") text += " +- " + fmt_pct(ci);
                if (marks.bold.count(a.scorer_id)) text = "**" + text + "**";
                if (marks.best == a.scorer_id) text = "<u>" + text + "</u>";
                return text;
            };
            md << "| " << a.scorer_id << " | " << a.n_runs << " | "
               << cell(a.mean_acc, a.ci95_acc, acc_marks) << " | "
               << (has_auc ? cell(a.mean_auc, a.ci95_auc, auc_marks) : std::string("-"))
               << " |\n";
        }
    }
    md << "\n## Sources\n\n";
    md << "Every number above is recomputable from these score files.\n\n";
    for (const auto& [path, hash] : sources) {
        md << "- `" << path.string() << "` fnv1a64:" << to_hex(hash) << "\n";
    }

    std::cout << "wrote " << (out_dir / "report.md").string() << " and "
              << (out_dir / "aggregates.csv").string() << "\n";
    return kExitOk;
}

int cmd_synth(const fs::path& out_root, int n_per_class, int tile_side, uint64_t seed) {
    make_synthetic(out_root, n_per_class, tile_side, seed);
    std::cout << "wrote synthetic dataset under " << out_root.string() << " (4 classes x "
              << n_per_class << " tiles, side " << tile_side << ")\n";
    return kExitOk;
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Test-time transform prediction for open-set tile recognition"};
    app.require_subcommand(1);

    std::string config_path;
    std::string profile_override;
    uint64_t seed = 0;
    bool overwrite = false;

    auto* make_splits = app.add_subcommand("make-splits", "Build a split manifest");
    std::string ms_out;
    make_splits->add_option("--config", config_path, "Experiment config JSON")->required();
    make_splits->add_option("--profile", profile_override, "Profile override (desk|paper)");
    make_splits->add_option("--out", ms_out, "Manifest output path");

    auto* train = app.add_subcommand("train", "Train one seed");
    train->add_option("--config", config_path, "Experiment config JSON")->required();
    train->add_option("--profile", profile_override, "Profile override (desk|paper)");
    train->add_option("--seed", seed, "Training seed")->required();
    train->add_flag("--overwrite", overwrite, "Redo an existing seed");

    auto* score = app.add_subcommand("score", "Score test tiles with one scorer");
    std::string ckpt_path, manifest_path, scorer, score_out;
    int mc_passes = 32;
    bool mc_mean_entropies = false;
    score->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
    score->add_option("--manifest", manifest_path, "Split manifest")->required();
    score->add_option("--scorer", scorer, "t3po|msp|maxlogit|mcdropout")->required();
    score->add_option("--seed", seed, "Scoring seed (mcdropout)");
    score->add_option("--out", score_out, "Output CSV path");
    score->add_option("--mc-passes", mc_passes, "MC-Dropout forward passes");
    score->add_flag("--mc-mean-entropies", mc_mean_entropies,
                    "Score by mean of per-pass entropies instead of predictive entropy");

    auto* report = app.add_subcommand("report", "Aggregate runs into a table");
    std::string report_dir = "out", report_out;
    report->add_option("--experiment-dir", report_dir, "Directory holding experiment outputs");
    report->add_option("--out", report_out, "Report output directory (default: experiment dir)");

    auto* synth = app.add_subcommand("synth", "Generate the synthetic desk-scale dataset");
    std::string synth_out;
    int n_per_class = 120, tile_side = 32;
    synth->add_option("--out", synth_out, "Dataset root to create")->required();
    synth->add_option("--n-per-class", n_per_class, "Tiles per class");
    synth->add_option("--tile-side", tile_side, "Tile side in pixels");
    synth->add_option("--seed", seed, "Generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitData;
    }

    try {
        if (make_splits->parsed()) {
            const auto cfg = load_experiment_config(config_path, profile_override);
            return cmd_make_splits(cfg, ms_out);
        }
        if (train->parsed()) {
            const auto cfg = load_experiment_config(config_path, profile_override);
            return cmd_train(cfg, seed, overwrite);
        }
        if (score->parsed()) {
            return cmd_score(ckpt_path, manifest_path, scorer, seed, score_out, mc_passes,
                             mc_mean_entropies);
        }
        if (report->parsed()) {
            return cmd_report(report_dir, report_out.empty() ? fs::path(report_dir)
                                                             : fs::path(report_out));
        }
        if (synth->parsed()) {
            return cmd_synth(synth_out, n_per_class, tile_side, seed);
        }
    } catch (const UnsupportedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUnsupported;
    } catch (const ConsistencyError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConsistency;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}

}  // namespace t3po
