#include "t3po/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "t3po/errors.hpp"
#include "t3po/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace t3po {

size_t DatasetIndex::total_files() const {
    size_t n = 0;
    for (const auto& files : class_files) n += files.size();
    return n;
}

int DatasetIndex::class_position(const std::string& name) const {
    for (size_t i = 0; i < class_names.size(); ++i) {
        if (class_names[i] == name) return static_cast<int>(i);
    }
    return -1;
}

std::string_view part_name(SplitPart part) {
    switch (part) {
        case SplitPart::train: return "train";
        case SplitPart::val: return "val";
        case SplitPart::test_closed: return "test_closed";
        case SplitPart::test_open: return "test_open";
    }
    return "?";
}

const std::vector<SplitEntry>& SplitAssignment::part(SplitPart p) const {
    switch (p) {
        case SplitPart::train: return train;
        case SplitPart::val: return val;
        case SplitPart::test_closed: return test_closed;
        case SplitPart::test_open: return test_open;
    }
    throw std::invalid_argument("unknown split part");
}

SplitConfig load_split_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot open split config " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError("split config " + file.string() + ": " + e.what());
    }
    SplitConfig cfg;
    try {
        cfg.dataset = j.at("dataset").get<std::string>();
        cfg.name = j.value("name", "S1");
        cfg.alias = j.value("alias", "");
        cfg.closed_classes = j.at("closed_classes").get<std::vector<std::string>>();
        cfg.open_classes = j.value("open_classes", std::vector<std::string>{});
        if (j.contains("fractions")) {
            auto f = j.at("fractions").get<std::vector<double>>();
            if (f.size() != 3) throw DataError("fractions must have 3 entries");
            cfg.fractions = {f[0], f[1], f[2]};
        }
        cfg.seed = j.value("seed", 0ull);
        if (j.contains("open_test_cap")) cfg.open_test_cap = j.at("open_test_cap").get<size_t>();
    } catch (const json::exception& e) {
        throw DataError("split config " + file.string() + ": " + e.what());
    }
    return cfg;
}

void save_split_config(const SplitConfig& cfg, const fs::path& file) {
    json j;
    j["dataset"] = cfg.dataset;
    j["name"] = cfg.name;
    j["alias"] = cfg.alias;
    j["closed_classes"] = cfg.closed_classes;
    j["open_classes"] = cfg.open_classes;
    j["fractions"] = {cfg.fractions[0], cfg.fractions[1], cfg.fractions[2]};
    j["seed"] = cfg.seed;
    if (cfg.open_test_cap) j["open_test_cap"] = *cfg.open_test_cap;
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw DataError("cannot write split config " + file.string());
    out << j.dump(2) << "\n";
}

DatasetIndex scan_dataset(const fs::path& root, int expected_side) {
    if (!fs::is_directory(root)) {
        throw DataError("dataset root does not exist: " + root.string());
    }
    DatasetIndex index;
    index.root = root;
    index.tile_side = expected_side;

    std::vector<std::string> folders;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) folders.push_back(entry.path().filename().string());
    }
    std::sort(folders.begin(), folders.end());
    if (folders.size() < 2) {
        throw DataError("dataset needs at least 2 class folders, found " +
                        std::to_string(folders.size()));
    }

    for (const std::string& cls : folders) {
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(root / cls)) {
            if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
        }
        std::sort(names.begin(), names.end());
        std::vector<std::string> kept;
        for (const std::string& name : names) {
            const std::string rel = cls + "/" + name;
            try {
                const ImageTile tile = read_ppm(root / cls / name);
                if (tile.width() != expected_side || tile.height() != expected_side) {
                    index.warnings.push_back(rel + ": geometry " + std::to_string(tile.width()) +
                                             "x" + std::to_string(tile.height()) + ", expected " +
                                             std::to_string(expected_side));
                    continue;
                }
                kept.push_back(rel);
            } catch (const DataError& e) {
                index.warnings.push_back(rel + ": " + e.what());
            }
        }
        if (kept.empty()) {
            throw DataError("class folder '" + cls + "' has no decodable tiles");
        }
        index.class_names.push_back(cls);
        index.class_files.push_back(std::move(kept));
    }
    return index;
}

namespace {

void validate_split_config(const DatasetIndex& index, const SplitConfig& cfg) {
    if (cfg.closed_classes.size() < 2) {
        throw DataError("split needs at least 2 closed classes");
    }
    const double fsum = cfg.fractions[0] + cfg.fractions[1] + cfg.fractions[2];
    if (std::fabs(fsum - 1.0) > 1e-9) {
        throw DataError("split fractions must sum to 1");
    }
    for (const std::string& c : cfg.closed_classes) {
        for (const std::string& o : cfg.open_classes) {
            if (c == o) throw DataError("class '" + c + "' is both closed and open");
        }
    }
    for (const std::string& name : cfg.closed_classes) {
        if (index.class_position(name) < 0) {
            throw DataError("closed class '" + name + "' not present in dataset");
        }
    }
    for (const std::string& name : cfg.open_classes) {
        if (index.class_position(name) < 0) {
            throw DataError("open class '" + name + "' not present in dataset");
        }
    }
}

}  // namespace

SplitAssignment build_split(const DatasetIndex& index, const SplitConfig& cfg) {
    validate_split_config(index, cfg);

    SplitAssignment out;
    out.dataset = cfg.dataset;
    out.split_name = cfg.name;
    out.seed = cfg.seed;
    out.root = index.root;
    out.closed_classes = cfg.closed_classes;
    out.open_classes = cfg.open_classes;

    for (size_t ci = 0; ci < cfg.closed_classes.size(); ++ci) {
        const std::string& cls = cfg.closed_classes[ci];
        std::vector<std::string> files = index.class_files[index.class_position(cls)];
        // Per-class stream keyed on the class name, so membership of other
        // classes cannot perturb this class's ordering.
        Rng rng(mix_seed(cfg.seed, cls));
        rng.shuffle(files);
        const size_t n = files.size();
        const size_t n_train = static_cast<size_t>(std::floor(n * cfg.fractions[0]));
        const size_t n_val = static_cast<size_t>(std::floor(n * cfg.fractions[1]));
        for (size_t i = 0; i < n; ++i) {
            SplitEntry entry{files[i], cls, static_cast<int>(ci)};
            if (i < n_train) {
                out.train.push_back(std::move(entry));
            } else if (i < n_train + n_val) {
                out.val.push_back(std::move(entry));
            } else {
                out.test_closed.push_back(std::move(entry));
            }
        }
    }

    for (const std::string& cls : cfg.open_classes) {
        std::vector<std::string> files = index.class_files[index.class_position(cls)];
        Rng rng(mix_seed(cfg.seed, cls));
        rng.shuffle(files);
        size_t take = files.size();
        if (cfg.open_test_cap) take = std::min(take, *cfg.open_test_cap);
        for (size_t i = 0; i < take; ++i) {
            out.test_open.push_back(SplitEntry{files[i], cls, -1});
        }
    }
    return out;
}

void save_manifest(const SplitAssignment& a, const fs::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest " + file.string());
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) s += ",";
            s += v[i];
        }
        return s;
    };
    out << "# t3po-split-manifest v1\n";
    out << "# dataset=" << a.dataset << "\n";
    out << "# split=" << a.split_name << "\n";
    out << "# seed=" << a.seed << "\n";
    out << "# root=" << a.root.string() << "\n";
    out << "# closed=" << join(a.closed_classes) << "\n";
    out << "# open=" << join(a.open_classes) << "\n";
    out << "path,part,class,class_index\n";
    for (SplitPart p : {SplitPart::train, SplitPart::val, SplitPart::test_closed,
                        SplitPart::test_open}) {
        for (const SplitEntry& e : a.part(p)) {
            out << e.path << "," << part_name(p) << "," << e.class_name << "," << e.class_index
                << "\n";
        }
    }
    if (!out) throw DataError("failed writing manifest " + file.string());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
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
    return fields;
}

std::vector<std::string> split_list(const std::string& s) {
    if (s.empty()) return {};
    return split_csv_line(s);
}

}  // namespace

SplitAssignment load_manifest(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot open manifest " + file.string());
    SplitAssignment a;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(2, eq - 2);
            const std::string value = line.substr(eq + 1);
            if (key == "dataset") a.dataset = value;
            else if (key == "split") a.split_name = value;
            else if (key == "seed") a.seed = std::stoull(value);
            else if (key == "root") a.root = value;
            else if (key == "closed") a.closed_classes = split_list(value);
            else if (key == "open") a.open_classes = split_list(value);
            continue;
        }
        if (!header_seen) {
            if (line != "path,part,class,class_index") {
                throw DataError("manifest " + file.string() + ": unexpected header '" + line + "'");
            }
            header_seen = true;
            continue;
        }
        const auto fields = split_csv_line(line);
        if (fields.size() != 4) {
            throw DataError("manifest " + file.string() + ": malformed record '" + line + "'");
        }
        SplitEntry e{fields[0], fields[2], std::stoi(fields[3])};
        if (fields[1] == "train") a.train.push_back(std::move(e));
        else if (fields[1] == "val") a.val.push_back(std::move(e));
        else if (fields[1] == "test_closed") a.test_closed.push_back(std::move(e));
        else if (fields[1] == "test_open") a.test_open.push_back(std::move(e));
        else throw DataError("manifest " + file.string() + ": unknown part '" + fields[1] + "'");
    }
    if (!header_seen) throw DataError("manifest " + file.string() + ": missing header");
    return a;
}

TrainBatchStream::TrainBatchStream(const SplitAssignment& assignment, const TransformSpace& space,
                                   size_t batch_size, uint64_t seed, int epoch)
    : assignment_(assignment),
      space_(space),
      batch_size_(batch_size),
      rng_(mix_seed(seed, "train-epoch", static_cast<uint64_t>(epoch))) {
    if (batch_size_ == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (assignment_.train.empty()) throw DataError("train split is empty");
    order_.resize(assignment_.train.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
}

bool TrainBatchStream::next(TrainBatch& out) {
    out.samples.clear();
    if (cursor_ >= order_.size()) return false;
    while (cursor_ < order_.size() && out.samples.size() < batch_size_) {
        const SplitEntry& entry = assignment_.train[order_[cursor_]];
        ++cursor_;
        ImageTile tile;
        try {
            tile = read_ppm(assignment_.root / entry.path);
        } catch (const DataError&) {
            continue;  // decode failures are skipped, matching scan semantics
        }
        const TransformSpec geo = sample_transform(rng_, space_, TransformFamily::geometric);
        const TransformSpec app = sample_transform(rng_, space_, TransformFamily::appearance);
        if (observer_) observer_(geo, app);
        TrainSample sample;
        sample.tile = apply_appearance(apply_geometric(tile, geo), app);
        sample.class_label = entry.class_index;
        sample.xform_label = transform_label(app);
        out.samples.push_back(std::move(sample));
    }
    return !out.samples.empty();
}

EvalBatchStream::EvalBatchStream(const SplitAssignment& assignment, SplitPart part,
                                 size_t batch_size)
    : assignment_(assignment), entries_(&assignment.part(part)), batch_size_(batch_size) {
    if (batch_size_ == 0) throw std::invalid_argument("batch_size must be >= 1");
}

bool EvalBatchStream::next(EvalBatch& out) {
    out.tiles.clear();
    out.labels.clear();
    out.paths.clear();
    if (cursor_ >= entries_->size()) return false;
    while (cursor_ < entries_->size() && out.tiles.size() < batch_size_) {
        const SplitEntry& entry = (*entries_)[cursor_];
        ++cursor_;
        out.tiles.push_back(read_ppm(assignment_.root / entry.path));
        out.labels.push_back(entry.class_index);
        out.paths.push_back(entry.path);
    }
    return !out.tiles.empty();
}

namespace {

struct Hsv {
    double h, s, v;
};

void put_pixel(ImageTile& tile, int x, int y, const Hsv& hsv) {
    double r, g, b;
    hsv_to_rgb(hsv.h - std::floor(hsv.h), std::clamp(hsv.s, 0.0, 1.0),
               std::clamp(hsv.v, 0.0, 1.0), r, g, b);
    tile.at(x, y, 0) = to_level(r);
    tile.at(x, y, 1) = to_level(g);
    tile.at(x, y, 2) = to_level(b);
}

// All three closed classes draw from one shared pink/purple palette, so
// class identity lives in the texture, not the histogram. That keeps
// closed-set classification from saturating on epoch one while leaving a
// stable global palette for the transform head to anchor on.
struct Palette {
    Hsv light;  // pale background tone
    Hsv pink;
    Hsv purple;
};

Palette shared_palette(Rng& rng) {
    // Narrow jitter: the natural appearance must form a tight cluster or
    // the identity label stays ambiguous against mild transforms.
    Palette p;
    p.light = {rng.uniform(0.91, 0.93), rng.uniform(0.04, 0.10), rng.uniform(0.84, 0.88)};
    p.pink = {rng.uniform(0.92, 0.94), rng.uniform(0.52, 0.58), rng.uniform(0.68, 0.72)};
    p.purple = {rng.uniform(0.77, 0.79), rng.uniform(0.52, 0.58), rng.uniform(0.43, 0.47)};
    return p;
}

// Purple/pink blobs over a pale background. Sparse draws leave mostly
// background, so the class boundary stays hard for several epochs.
ImageTile synth_blobs(Rng& rng, int side) {
    ImageTile tile(side, side);
    const Palette pal = shared_palette(rng);
    struct Blob {
        double cx, cy, r;
        bool dark;
    };
    std::vector<Blob> blobs;
    const int n_blobs = 3 + static_cast<int>(rng.uniform_int(11));
    for (int i = 0; i < n_blobs; ++i) {
        blobs.push_back({rng.uniform(0.0, side), rng.uniform(0.0, side),
                         rng.uniform(side / 12.0, side / 3.5), rng.uniform_int(4) != 0});
    }
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            Hsv px = pal.light;
            for (const Blob& b : blobs) {
                const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
                if (d2 < b.r * b.r) {
                    px = b.dark ? pal.purple : pal.pink;
                    break;
                }
            }
            px.v += rng.uniform(-0.02, 0.02);
            put_pixel(tile, x, y, px);
        }
    }
    return tile;
}

// Checkerboard; cell size from coarse to near-pixel grain, and a quarter
// of the tiles use the subtle pink-on-light pairing.
ImageTile synth_checker(Rng& rng, int side) {
    ImageTile tile(side, side);
    const Palette pal = shared_palette(rng);
    const int cell = 2 + static_cast<int>(rng.uniform_int(9));
    const int ox = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cell)));
    const int oy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cell)));
    const bool subtle = rng.uniform_int(4) == 0;
    const Hsv a = subtle ? pal.light : pal.purple;
    const Hsv b = pal.pink;
    const double slope = rng.uniform(-0.1, 0.1);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const bool odd = (((x + ox) / cell) + ((y + oy) / cell)) % 2 != 0;
            Hsv px = odd ? b : a;
            px.v += slope * (y - side / 2.0) / side + rng.uniform(-0.02, 0.02);
            put_pixel(tile, x, y, px);
        }
    }
    return tile;
}

// Bands from thin to half-tile width, three orientations, with a subtle
// two-tone variant.
ImageTile synth_stripes(Rng& rng, int side) {
    ImageTile tile(side, side);
    const Palette pal = shared_palette(rng);
    const int orient = static_cast<int>(rng.uniform_int(3));  // h, v, diagonal
    const int band = 2 + static_cast<int>(rng.uniform_int(9));
    const int phase = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(band * 3)));
    const bool subtle = rng.uniform_int(4) == 0;
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const int t = (orient == 0 ? y : orient == 1 ? x : x + y) + phase;
            const int k = (t / band) % 3;
            Hsv px = k == 0 ? pal.pink : k == 1 ? (subtle ? pal.light : pal.purple) : pal.light;
            px.v += rng.uniform(-0.05, 0.05);
            put_pixel(tile, x, y, px);
        }
    }
    return tile;
}

// Achromatic blotchy noise. Spatially it resembles the pale background
// regions of the closed classes, where hue and saturation transforms are
// near-invisible during training, so the transform posterior has no sharp
// answer on tiles like these.
ImageTile synth_graynoise(Rng& rng, int side) {
    ImageTile tile(side, side);
    const double base = rng.uniform(0.72, 0.88);
    const double tint_h = rng.uniform01();
    const double tint_s = rng.uniform(0.0, 0.035);
    struct Patch {
        double cx, cy, r, dv;
    };
    std::vector<Patch> patches;
    const int n_patches = 3 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < n_patches; ++i) {
        patches.push_back({rng.uniform(0.0, side), rng.uniform(0.0, side),
                           rng.uniform(side / 6.0, side / 2.5),
                           rng.uniform(-0.15, 0.15)});
    }
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            double v = base + rng.uniform(-0.02, 0.02);
            for (const Patch& p : patches) {
                const double d2 = (x - p.cx) * (x - p.cx) + (y - p.cy) * (y - p.cy);
                v += p.dv * std::exp(-d2 / (p.r * p.r));
            }
            double r, gc, b;
            hsv_to_rgb(tint_h, tint_s, std::clamp(v, 0.0, 1.0), r, gc, b);
            tile.at(x, y, 0) = to_level(r);
            tile.at(x, y, 1) = to_level(gc);
            tile.at(x, y, 2) = to_level(b);
        }
    }
    return tile;
}

}  // namespace

void make_synthetic(const fs::path& root, int n_per_class, int tile_side, uint64_t seed) {
    if (n_per_class < 20) throw DataError("synthetic dataset needs n_per_class >= 20");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw DataError("cannot create " + root.string() + ": " + ec.message());

    struct ClassGen {
        const char* name;
        ImageTile (*gen)(Rng&, int);
    };
    const ClassGen classes[] = {
        {"blobs", synth_blobs},
        {"checker", synth_checker},
        {"graynoise", synth_graynoise},
        {"stripes", synth_stripes},
    };
    for (const ClassGen& cls : classes) {
        const fs::path dir = root / cls.name;
        fs::create_directories(dir, ec);
        if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
        for (int i = 0; i < n_per_class; ++i) {
            Rng rng(mix_seed(seed, cls.name, static_cast<uint64_t>(i)));
            const ImageTile tile = cls.gen(rng, tile_side);
            char name[32];
            std::snprintf(name, sizeof name, "tile_%04d.ppm", i);
            write_ppm(tile, dir / name);
        }
    }
}

}  // namespace t3po
