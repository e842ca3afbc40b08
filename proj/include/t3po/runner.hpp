#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "t3po/dataset.hpp"
#include "t3po/nnet.hpp"
#include "t3po/scoring.hpp"

namespace t3po {

// CLI exit-code contract, stable for scripting.
inline constexpr int kExitOk = 0;
inline constexpr int kExitData = 2;
inline constexpr int kExitTraining = 3;
inline constexpr int kExitConsistency = 4;
inline constexpr int kExitUnsupported = 5;

// Fully resolved experiment description. Profiles fill defaults; the
// JSON file only needs to override what differs.
struct ExperimentConfig {
    std::string profile = "desk";  // desk | paper
    std::filesystem::path dataset_root;
    std::filesystem::path split_config_path;
    SplitConfig split;  // loaded content of split_config_path
    std::filesystem::path manifest_path;
    std::string backbone;
    bool pretrained = false;
    int tile_side = 0;
    TrainConfig train;
    std::vector<ScorerId> scorers;
    std::vector<uint64_t> seeds;
    int mc_passes = 32;
    std::filesystem::path out_dir = "out";
};

// Reads the config, applies profile defaults and the T3PO_DATA_ROOT
// override, loads the split config content and validates seeds.
ExperimentConfig load_experiment_config(const std::filesystem::path& file,
                                        const std::string& profile_override = "");

// Hash over the semantically meaningful fields (profile, backbone,
// pretrained flag, tile side, training parameters, split content, dataset
// root). Output paths, seed lists and scorer lists do not participate.
std::string config_hash(const ExperimentConfig& cfg);

std::filesystem::path experiment_dir(const ExperimentConfig& cfg);
std::filesystem::path seed_dir(const ExperimentConfig& cfg, uint64_t seed);

int cmd_make_splits(const ExperimentConfig& cfg, const std::filesystem::path& out_override = {});
int cmd_train(const ExperimentConfig& cfg, uint64_t seed, bool overwrite);
int cmd_score(const std::filesystem::path& checkpoint_file,
              const std::filesystem::path& manifest_file, const std::string& scorer,
              uint64_t seed, const std::filesystem::path& out_csv, int mc_passes,
              bool mc_mean_entropies = false);
int cmd_report(const std::filesystem::path& experiment_root,
               const std::filesystem::path& out_dir);
int cmd_synth(const std::filesystem::path& out_root, int n_per_class, int tile_side,
              uint64_t seed);

// Argument parsing plus the exit-code mapping; the t3po binary is a thin
// wrapper around this.
int run_cli(int argc, const char* const* argv);

}  // namespace t3po
