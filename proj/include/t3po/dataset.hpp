#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "t3po/image.hpp"
#include "t3po/rng.hpp"
#include "t3po/transforms.hpp"

namespace t3po {

// Immutable listing of a class-foldered tile directory. Paths are stored
// relative to the root.
struct DatasetIndex {
    std::filesystem::path root;
    std::vector<std::string> class_names;             // lexicographic folder order
    std::vector<std::vector<std::string>> class_files;  // per class, sorted
    int tile_side = 0;
    std::vector<std::string> warnings;  // skipped/undecodable files

    size_t total_files() const;
    int class_position(const std::string& name) const;  // -1 when absent
};

struct SplitConfig {
    std::string dataset;
    std::string name;       // S1/S2/S3
    std::string alias;      // "Split 0" style, matches the report tables
    std::vector<std::string> closed_classes;
    std::vector<std::string> open_classes;
    std::array<double, 3> fractions{0.70, 0.15, 0.15};
    uint64_t seed = 0;
    std::optional<size_t> open_test_cap;

    std::string split_id() const { return dataset + "/" + name; }
};

SplitConfig load_split_config(const std::filesystem::path& file);
void save_split_config(const SplitConfig& cfg, const std::filesystem::path& file);

struct SplitEntry {
    std::string path;        // relative to dataset root
    std::string class_name;
    int class_index = -1;    // index into closed_classes; -1 for open
};

enum class SplitPart { train, val, test_closed, test_open };
std::string_view part_name(SplitPart part);

struct SplitAssignment {
    std::string dataset;
    std::string split_name;
    uint64_t seed = 0;
    std::filesystem::path root;
    std::vector<std::string> closed_classes;
    std::vector<std::string> open_classes;
    std::vector<SplitEntry> train;
    std::vector<SplitEntry> val;
    std::vector<SplitEntry> test_closed;
    std::vector<SplitEntry> test_open;

    const std::vector<SplitEntry>& part(SplitPart p) const;
};

// Lists every decodable tile under root/<class>/<file>. Files that fail
// to decode or mismatch the expected geometry are excluded and reported
// in DatasetIndex::warnings.
DatasetIndex scan_dataset(const std::filesystem::path& root, int expected_side);

// Stratified per-class shuffle at cfg.seed; closed classes partitioned by
// cfg.fractions (floor/floor/remainder), open classes go to test_open
// only. Pure function of (index, cfg).
SplitAssignment build_split(const DatasetIndex& index, const SplitConfig& cfg);

// Manifest: '#' metadata header plus one CSV record per file with fields
// path, part, class, class_index.
void save_manifest(const SplitAssignment& assignment, const std::filesystem::path& file);
SplitAssignment load_manifest(const std::filesystem::path& file);

struct TrainSample {
    ImageTile tile;      // geometric then appearance transform applied
    int class_label = 0;
    int xform_label = 0;
};

struct TrainBatch {
    std::vector<TrainSample> samples;
};

// One epoch over the train part: seeded shuffle, then per tile a sampled
// geometric transform followed by a sampled appearance transform whose
// label becomes the pretext target. Batch content depends only on
// (seed, epoch, position).
class TrainBatchStream {
public:
    TrainBatchStream(const SplitAssignment& assignment, const TransformSpace& space,
                     size_t batch_size, uint64_t seed, int epoch);

    bool next(TrainBatch& out);

    // Test hook: observes each (geometric, appearance) spec pair as it is
    // applied.
    void set_observer(std::function<void(const TransformSpec&, const TransformSpec&)> fn) {
        observer_ = std::move(fn);
    }

private:
    const SplitAssignment& assignment_;
    const TransformSpace& space_;
    size_t batch_size_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
    Rng rng_;
    std::function<void(const TransformSpec&, const TransformSpec&)> observer_;
};

struct EvalBatch {
    std::vector<ImageTile> tiles;
    std::vector<int> labels;        // closed-class index, -1 for open
    std::vector<std::string> paths;
};

// Untransformed tiles in deterministic (assignment) order.
class EvalBatchStream {
public:
    EvalBatchStream(const SplitAssignment& assignment, SplitPart part, size_t batch_size);

    bool next(EvalBatch& out);
    void reset() { cursor_ = 0; }
    size_t size() const { return entries_->size(); }

private:
    const SplitAssignment& assignment_;
    const std::vector<SplitEntry>* entries_;
    size_t batch_size_;
    size_t cursor_ = 0;
};

// Writes a 4-class synthetic corpus in scan_dataset layout: three
// colorful textured classes (closed candidates) and one low-saturation
// gray-noise class on which hue and saturation transforms are nearly
// unidentifiable (open candidate). Deterministic from seed.
void make_synthetic(const std::filesystem::path& root, int n_per_class, int tile_side,
                    uint64_t seed);

inline constexpr const char* kSyntheticClosedClasses[3] = {"blobs", "checker", "stripes"};
inline constexpr const char* kSyntheticOpenClass = "graynoise";

}  // namespace t3po
