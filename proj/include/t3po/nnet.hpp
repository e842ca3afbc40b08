#pragma once

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "t3po/dataset.hpp"
#include "t3po/image.hpp"
#include "t3po/rng.hpp"

namespace t3po {

// Dense [c][h][w] activation block.
struct Volume {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> v;

    Volume() = default;
    Volume(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_) {}
    double& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
    size_t size() const { return v.size(); }
};

struct BackboneSpec {
    // micro2: 2-block test net (<1k parameters with small heads)
    // small4: 4-block desk-scale CNN
    // mobile: depthwise-separable stack for the paper profile
    std::string arch = "small4";
    bool pretrained = false;  // selects ImageNet input statistics
};

struct TrainConfig {
    size_t batch_size = 128;
    double base_lr = 0.01;
    int epochs = 200;
    double lambda = 1.0;  // weight of the transform-prediction loss
    double dropout_rate = 0.2;
    uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

// Triangular schedule: linear descent base_lr -> base_lr/100 across one
// cycle, then reset to base_lr.
double cyclical_lr(long step, long steps_per_cycle, double base_lr);

struct BatchOutput {
    size_t batch = 0;
    int n_classes = 0;
    std::vector<double> class_logits;  // batch x n_classes, row-major
    std::vector<double> xform_logits;  // batch x 7
    std::vector<double> class_probs;
    std::vector<double> xform_probs;

    std::span<const double> class_logit_row(size_t i) const;
    std::span<const double> xform_logit_row(size_t i) const;
    std::span<const double> class_prob_row(size_t i) const;
    std::span<const double> xform_prob_row(size_t i) const;
};

// One backbone stage; parameters live in the model's flat vector at
// [w_off, b_off) slices. groupnorm is per-sample (groups over channels),
// so forward passes stay independent of batch composition.
struct LayerDef {
    enum class Type { conv3, conv1, dwconv3, groupnorm, relu, maxpool2, gap };
    Type type;
    int in_c = 0;
    int out_c = 0;
    int groups = 1;
    size_t w_off = 0;
    size_t b_off = 0;
};

// Shared backbone feeding a closed-set class head and a 7-way transform
// head off the same pooled representation. Dropout sits on the class-head
// pathway only and is inactive unless a dropout RNG is supplied.
class TwoHeadModel {
public:
    TwoHeadModel(const BackboneSpec& backbone, int n_classes,
                 std::vector<std::string> class_names, double dropout_rate, uint64_t init_seed);

    const BackboneSpec& backbone() const { return backbone_; }
    int n_classes() const { return n_classes_; }
    const std::vector<std::string>& class_names() const { return class_names_; }
    double dropout_rate() const { return dropout_rate_; }
    int rep_dim() const { return rep_dim_; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    std::array<double, 3> input_mean() const { return in_mean_; }
    std::array<double, 3> input_std() const { return in_std_; }

    // Offsets of the head parameter blocks inside the flat vector.
    struct ParamLayout {
        size_t class_w = 0, class_b = 0, xform_w = 0, xform_b = 0, total = 0;
    };
    ParamLayout param_layout() const {
        return {class_w_off_, class_b_off_, xform_w_off_, xform_b_off_, params_.size()};
    }

    // Deterministic evaluation pass (dropout off).
    BatchOutput forward(std::span<const ImageTile> tiles) const;

    // Stochastic pass with dropout active on the class-head pathway.
    BatchOutput forward_dropout(std::span<const ImageTile> tiles, Rng& rng,
                                std::optional<double> rate_override = std::nullopt) const;

    // Joint loss and flat parameter gradient for one batch. Returns
    // (mean class CE, mean transform CE); gradient of
    // loss_class + lambda * loss_xform is accumulated into grad, which
    // must have params().size() entries.
    std::pair<double, double> loss_and_grad(const TrainBatch& batch, double lambda,
                                            Rng* dropout_rng, std::vector<double>& grad) const;

    // Loss parts only, same graph as loss_and_grad with dropout off; used
    // by the finite-difference oracle.
    std::pair<double, double> loss_only(const TrainBatch& batch) const;

    Volume tile_to_input(const ImageTile& tile) const;

private:
    struct Trace;
    void forward_volume(const Volume& input, Trace& trace, Rng* dropout_rng,
                        double dropout_rate) const;
    void backward_volume(Trace& trace, std::span<const double> dlogits_class,
                         std::span<const double> dlogits_xform, std::vector<double>& grad) const;

    BackboneSpec backbone_;
    int n_classes_ = 0;
    std::vector<std::string> class_names_;
    double dropout_rate_ = 0.0;
    int rep_dim_ = 0;
    std::vector<LayerDef> layers_;
    std::vector<double> params_;
    std::array<double, 3> in_mean_{0.0, 0.0, 0.0};
    std::array<double, 3> in_std_{1.0, 1.0, 1.0};
    size_t class_w_off_ = 0, class_b_off_ = 0, xform_w_off_ = 0, xform_b_off_ = 0;
};

// mean CE(class) + lambda * mean CE(transform) over one batch of logits.
// Row-major logits, labels in range; throws on out-of-range labels.
double joint_loss(std::span<const double> class_logits, std::span<const int> class_labels,
                  int n_classes, std::span<const double> xform_logits,
                  std::span<const int> xform_labels, double lambda);

// Row-wise stable softmax.
std::vector<double> softmax_rows(std::span<const double> logits, size_t batch, int k);

struct EpochLog {
    int epoch = 0;  // 1-based
    double lr = 0.0;
    double loss_class = 0.0;
    double loss_xform = 0.0;
    double val_acc = 0.0;
};

struct Checkpoint {
    std::string arch;
    bool pretrained = false;
    int n_classes = 0;
    std::vector<std::string> class_names;
    double dropout_rate = 0.0;
    int epoch = 0;
    double val_acc = 0.0;
    std::string config_hash;
    std::vector<double> params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);
TwoHeadModel model_from_checkpoint(const Checkpoint& ckpt);

// Pull-based batch sources so training does not care where tiles come
// from (disk-backed streams in production, in-memory fixtures in tests).
using TrainBatchFn = std::function<bool(TrainBatch&)>;
using TrainEpochFactory = std::function<TrainBatchFn(int epoch)>;
using EvalBatchFn = std::function<bool(EvalBatch&)>;
using EvalStreamFactory = std::function<EvalBatchFn()>;

struct FitResult {
    Checkpoint best;
    std::vector<EpochLog> log;
};

// Runs cfg.epochs epochs of Adam with the cyclical schedule, evaluates
// closed-set accuracy on val after each epoch and returns the parameter
// snapshot with the highest val accuracy (ties -> earliest epoch).
// Non-finite losses abort with a TrainingError carrying epoch/batch/parts.
FitResult fit(TwoHeadModel& model, const TrainEpochFactory& train_epochs,
              const EvalStreamFactory& val_stream, const TrainConfig& cfg,
              size_t steps_per_epoch);

double evaluate_accuracy(const TwoHeadModel& model, const EvalBatchFn& stream);

void save_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& file);

}  // namespace t3po
