#include "t3po/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "t3po/errors.hpp"
#include "t3po/hash.hpp"

using nlohmann::json;

namespace t3po {

namespace {

using LT = LayerDef::Type;

std::vector<LayerDef> build_arch(const std::string& arch) {
    auto conv = [](int in, int out) { return LayerDef{LT::conv3, in, out, 1}; };
    auto pw = [](int in, int out) { return LayerDef{LT::conv1, in, out, 1}; };
    auto dw = [](int c) { return LayerDef{LT::dwconv3, c, c, 1}; };
    auto gn = [](int c) {
        return LayerDef{LT::groupnorm, c, c, c % 8 == 0 ? 8 : (c % 2 == 0 ? 2 : 1)};
    };
    auto relu = [](int c) { return LayerDef{LT::relu, c, c, 1}; };
    auto pool = [](int c) { return LayerDef{LT::maxpool2, c, c, 1}; };
    auto gap = [](int c) { return LayerDef{LT::gap, c, c, 1}; };

    if (arch == "micro2") {
        return {conv(3, 6), gn(6), relu(6), pool(6), conv(6, 8), gn(8), relu(8), pool(8), gap(8)};
    }
    // No normalization: per-sample norms rescale off-distribution inputs
    // back onto the feature manifold, which erases the low-magnitude
    // signal the open-set scores depend on.
    if (arch == "small4") {
        return {conv(3, 16),  relu(16), pool(16),  //
                conv(16, 32), relu(32), pool(32),  //
                conv(32, 64), relu(64), pool(64),  //
                conv(64, 64), relu(64), gap(64)};
    }
    if (arch == "mobile") {
        return {conv(3, 16),   gn(16),  relu(16),  pool(16),                      //
                dw(16),        gn(16),  relu(16),  pw(16, 32),   gn(32),  relu(32),
                pool(32),                                                          //
                dw(32),        gn(32),  relu(32),  pw(32, 64),   gn(64),  relu(64),
                pool(64),                                                          //
                dw(64),        gn(64),  relu(64),  pw(64, 128),  gn(128), relu(128),
                pool(128),                                                         //
                dw(128),       gn(128), relu(128), pw(128, 128), gn(128), relu(128),
                gap(128)};
    }
    throw DataError("unknown backbone architecture '" + arch + "'");
}

size_t weight_count(const LayerDef& l) {
    switch (l.type) {
        case LT::conv3: return static_cast<size_t>(l.out_c) * l.in_c * 9;
        case LT::conv1: return static_cast<size_t>(l.out_c) * l.in_c;
        case LT::dwconv3: return static_cast<size_t>(l.out_c) * 9;
        case LT::groupnorm: return static_cast<size_t>(l.out_c);  // per-channel scale
        default: return 0;
    }
}

size_t bias_count(const LayerDef& l) {
    switch (l.type) {
        case LT::conv3:
        case LT::conv1:
        case LT::dwconv3:
        case LT::groupnorm: return static_cast<size_t>(l.out_c);
        default: return 0;
    }
}

constexpr double kGnEps = 1e-5;

void conv3_forward(const Volume& in, Volume& out, const double* w, const double* b) {
    const int h = in.h, wd = in.w;
    for (int oc = 0; oc < out.c; ++oc) {
        double* op = &out.v[static_cast<size_t>(oc) * h * wd];
        std::fill(op, op + static_cast<size_t>(h) * wd, b[oc]);
        for (int ic = 0; ic < in.c; ++ic) {
            const double* ip = &in.v[static_cast<size_t>(ic) * h * wd];
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double wk = w[((static_cast<size_t>(oc) * in.c + ic) * 3 + ky) * 3 + kx];
                    const int y0 = std::max(0, 1 - ky);
                    const int y1 = std::min(h, h + 1 - ky);
                    const int x0 = std::max(0, 1 - kx);
                    const int x1 = std::min(wd, wd + 1 - kx);
                    for (int y = y0; y < y1; ++y) {
                        const double* row = ip + static_cast<size_t>(y + ky - 1) * wd + (kx - 1);
                        double* orow = op + static_cast<size_t>(y) * wd;
                        for (int x = x0; x < x1; ++x) orow[x] += wk * row[x];
                    }
                }
            }
        }
    }
}

void conv3_backward(const Volume& in, const Volume& dout, Volume& din, const double* w,
                    double* dw, double* db) {
    const int h = in.h, wd = in.w;
    for (int oc = 0; oc < dout.c; ++oc) {
        const double* dop = &dout.v[static_cast<size_t>(oc) * h * wd];
        double acc = 0.0;
        for (size_t i = 0; i < static_cast<size_t>(h) * wd; ++i) acc += dop[i];
        db[oc] += acc;
        for (int ic = 0; ic < in.c; ++ic) {
            const double* ip = &in.v[static_cast<size_t>(ic) * h * wd];
            double* dip = &din.v[static_cast<size_t>(ic) * h * wd];
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const size_t widx = ((static_cast<size_t>(oc) * in.c + ic) * 3 + ky) * 3 + kx;
                    const double wk = w[widx];
                    double grad_w = 0.0;
                    const int y0 = std::max(0, 1 - ky);
                    const int y1 = std::min(h, h + 1 - ky);
                    const int x0 = std::max(0, 1 - kx);
                    const int x1 = std::min(wd, wd + 1 - kx);
                    for (int y = y0; y < y1; ++y) {
                        const double* irow = ip + static_cast<size_t>(y + ky - 1) * wd + (kx - 1);
                        double* dirow = dip + static_cast<size_t>(y + ky - 1) * wd + (kx - 1);
                        const double* drow = dop + static_cast<size_t>(y) * wd;
                        for (int x = x0; x < x1; ++x) {
                            grad_w += drow[x] * irow[x];
                            dirow[x] += wk * drow[x];
                        }
                    }
                    dw[widx] += grad_w;
                }
            }
        }
    }
}

void conv1_forward(const Volume& in, Volume& out, const double* w, const double* b) {
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    for (int oc = 0; oc < out.c; ++oc) {
        double* op = &out.v[oc * plane];
        std::fill(op, op + plane, b[oc]);
        for (int ic = 0; ic < in.c; ++ic) {
            const double wk = w[static_cast<size_t>(oc) * in.c + ic];
            const double* ip = &in.v[ic * plane];
            for (size_t i = 0; i < plane; ++i) op[i] += wk * ip[i];
        }
    }
}

void conv1_backward(const Volume& in, const Volume& dout, Volume& din, const double* w,
                    double* dw, double* db) {
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    for (int oc = 0; oc < dout.c; ++oc) {
        const double* dop = &dout.v[oc * plane];
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += dop[i];
        db[oc] += acc;
        for (int ic = 0; ic < in.c; ++ic) {
            const double* ip = &in.v[ic * plane];
            double* dip = &din.v[ic * plane];
            const size_t widx = static_cast<size_t>(oc) * in.c + ic;
            const double wk = w[widx];
            double grad_w = 0.0;
            for (size_t i = 0; i < plane; ++i) {
                grad_w += dop[i] * ip[i];
                dip[i] += wk * dop[i];
            }
            dw[widx] += grad_w;
        }
    }
}

void dwconv3_forward(const Volume& in, Volume& out, const double* w, const double* b) {
    const int h = in.h, wd = in.w;
    for (int c = 0; c < in.c; ++c) {
        const double* ip = &in.v[static_cast<size_t>(c) * h * wd];
        double* op = &out.v[static_cast<size_t>(c) * h * wd];
        std::fill(op, op + static_cast<size_t>(h) * wd, b[c]);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const double wk = w[(static_cast<size_t>(c) * 3 + ky) * 3 + kx];
                const int y0 = std::max(0, 1 - ky);
                const int y1 = std::min(h, h + 1 - ky);
                const int x0 = std::max(0, 1 - kx);
                const int x1 = std::min(wd, wd + 1 - kx);
                for (int y = y0; y < y1; ++y) {
                    const double* row = ip + static_cast<size_t>(y + ky - 1) * wd + (kx - 1);
                    double* orow = op + static_cast<size_t>(y) * wd;
                    for (int x = x0; x < x1; ++x) orow[x] += wk * row[x];
                }
            }
        }
    }
}

void dwconv3_backward(const Volume& in, const Volume& dout, Volume& din, const double* w,
                      double* dw, double* db) {
    const int h = in.h, wd = in.w;
    for (int c = 0; c < in.c; ++c) {
        const double* ip = &in.v[static_cast<size_t>(c) * h * wd];
        double* dip = &din.v[static_cast<size_t>(c) * h * wd];
        const double* dop = &dout.v[static_cast<size_t>(c) * h * wd];
        double acc = 0.0;
        for (size_t i = 0; i < static_cast<size_t>(h) * wd; ++i) acc += dop[i];
        db[c] += acc;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const size_t widx = (static_cast<size_t>(c) * 3 + ky) * 3 + kx;
                const double wk = w[widx];
                double grad_w = 0.0;
                const int y0 = std::max(0, 1 - ky);
                const int y1 = std::min(h, h + 1 - ky);
                const int x0 = std::max(0, 1 - kx);
                const int x1 = std::min(wd, wd + 1 - kx);
                for (int y = y0; y < y1; ++y) {
                    const double* irow = ip + static_cast<size_t>(y + ky - 1) * wd + (kx - 1);
                    double* dirow = dip + static_cast<size_t>(y + ky - 1) * wd + (kx - 1);
                    const double* drow = dop + static_cast<size_t>(y) * wd;
                    for (int x = x0; x < x1; ++x) {
                        grad_w += drow[x] * irow[x];
                        dirow[x] += wk * drow[x];
                    }
                }
                dw[widx] += grad_w;
            }
        }
    }
}

}  // namespace

double cyclical_lr(long step, long steps_per_cycle, double base_lr) {
    if (step < 0) throw std::invalid_argument("cyclical_lr: negative step");
    if (steps_per_cycle <= 1) return base_lr;
    const double floor_lr = base_lr / 100.0;
    const long s = step % steps_per_cycle;
    return base_lr + (floor_lr - base_lr) * static_cast<double>(s) /
                         static_cast<double>(steps_per_cycle - 1);
}

std::span<const double> BatchOutput::class_logit_row(size_t i) const {
    return {class_logits.data() + i * n_classes, static_cast<size_t>(n_classes)};
}
std::span<const double> BatchOutput::xform_logit_row(size_t i) const {
    return {xform_logits.data() + i * kNumAppearanceKinds,
            static_cast<size_t>(kNumAppearanceKinds)};
}
std::span<const double> BatchOutput::class_prob_row(size_t i) const {
    return {class_probs.data() + i * n_classes, static_cast<size_t>(n_classes)};
}
std::span<const double> BatchOutput::xform_prob_row(size_t i) const {
    return {xform_probs.data() + i * kNumAppearanceKinds,
            static_cast<size_t>(kNumAppearanceKinds)};
}

std::vector<double> softmax_rows(std::span<const double> logits, size_t batch, int k) {
    std::vector<double> probs(logits.size());
    for (size_t i = 0; i < batch; ++i) {
        const double* row = logits.data() + i * k;
        double* prow = probs.data() + i * k;
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - m);
            sum += prow[j];
        }
        for (int j = 0; j < k; ++j) prow[j] /= sum;
    }
    return probs;
}

namespace {

// -log softmax(logits)[label], numerically stable.
double cross_entropy(const double* logits, int k, int label) {
    double m = logits[0];
    for (int j = 1; j < k; ++j) m = std::max(m, logits[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(logits[j] - m);
    return std::log(sum) + m - logits[label];
}

}  // namespace

double joint_loss(std::span<const double> class_logits, std::span<const int> class_labels,
                  int n_classes, std::span<const double> xform_logits,
                  std::span<const int> xform_labels, double lambda) {
    const size_t batch = class_labels.size();
    if (batch == 0 || xform_labels.size() != batch) {
        throw std::invalid_argument("joint_loss: bad batch");
    }
    double lc = 0.0;
    double lx = 0.0;
    for (size_t i = 0; i < batch; ++i) {
        if (class_labels[i] < 0 || class_labels[i] >= n_classes) {
            throw std::invalid_argument("joint_loss: class label out of range");
        }
        if (xform_labels[i] < 0 || xform_labels[i] >= kNumAppearanceKinds) {
            throw std::invalid_argument("joint_loss: transform label out of range");
        }
        lc += cross_entropy(class_logits.data() + i * n_classes, n_classes, class_labels[i]);
        lx += cross_entropy(xform_logits.data() + i * kNumAppearanceKinds, kNumAppearanceKinds,
                            xform_labels[i]);
    }
    return lc / batch + lambda * lx / batch;
}

struct TwoHeadModel::Trace {
    std::vector<Volume> acts;                 // acts[0] = input
    std::vector<std::vector<int>> pool_src;   // per layer, argmax indices
    std::vector<std::vector<double>> gn_xhat;  // per layer, normalized activations
    std::vector<std::vector<double>> gn_istd;  // per layer, per-group 1/sigma
    std::vector<double> rep;
    std::vector<double> rep_dropped;
    std::vector<double> drop_mask;            // empty when dropout inactive
    std::vector<double> class_logits;
    std::vector<double> xform_logits;
};

TwoHeadModel::TwoHeadModel(const BackboneSpec& backbone, int n_classes,
                           std::vector<std::string> class_names, double dropout_rate,
                           uint64_t init_seed)
    : backbone_(backbone),
      n_classes_(n_classes),
      class_names_(std::move(class_names)),
      dropout_rate_(dropout_rate),
      layers_(build_arch(backbone.arch)) {
    if (n_classes_ < 2) throw DataError("model needs at least 2 classes");
    if (dropout_rate_ < 0.0 || dropout_rate_ >= 1.0) {
        throw DataError("dropout rate must be in [0, 1)");
    }
    rep_dim_ = layers_.back().out_c;

    size_t off = 0;
    for (LayerDef& l : layers_) {
        l.w_off = off;
        off += weight_count(l);
        l.b_off = off;
        off += bias_count(l);
    }
    class_w_off_ = off;
    off += static_cast<size_t>(n_classes_) * rep_dim_;
    class_b_off_ = off;
    off += static_cast<size_t>(n_classes_);
    xform_w_off_ = off;
    off += static_cast<size_t>(kNumAppearanceKinds) * rep_dim_;
    xform_b_off_ = off;
    off += static_cast<size_t>(kNumAppearanceKinds);
    params_.assign(off, 0.0);

    Rng rng(mix_seed(init_seed, "init"));
    for (const LayerDef& l : layers_) {
        const size_t nw = weight_count(l);
        if (nw == 0) continue;
        if (l.type == LT::groupnorm) {
            for (size_t i = 0; i < nw; ++i) params_[l.w_off + i] = 1.0;
            continue;
        }
        double fan_in = 0.0;
        switch (l.type) {
            case LT::conv3: fan_in = l.in_c * 9.0; break;
            case LT::conv1: fan_in = l.in_c; break;
            case LT::dwconv3: fan_in = 9.0; break;
            default: break;
        }
        const double std_w = std::sqrt(2.0 / fan_in);
        for (size_t i = 0; i < nw; ++i) params_[l.w_off + i] = std_w * rng.normal();
    }
    const double std_head = std::sqrt(1.0 / rep_dim_);
    for (size_t i = 0; i < static_cast<size_t>(n_classes_) * rep_dim_; ++i) {
        params_[class_w_off_ + i] = std_head * rng.normal();
    }
    for (size_t i = 0; i < static_cast<size_t>(kNumAppearanceKinds) * rep_dim_; ++i) {
        params_[xform_w_off_ + i] = std_head * rng.normal();
    }

    if (backbone_.pretrained) {
        in_mean_ = {0.485, 0.456, 0.406};
        in_std_ = {0.229, 0.224, 0.225};
    }
}

Volume TwoHeadModel::tile_to_input(const ImageTile& tile) const {
    Volume v(3, tile.height(), tile.width());
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < tile.height(); ++y) {
            for (int x = 0; x < tile.width(); ++x) {
                v.at(c, y, x) = (tile.at(x, y, c) / 255.0 - in_mean_[c]) / in_std_[c];
            }
        }
    }
    return v;
}

void TwoHeadModel::forward_volume(const Volume& input, Trace& trace, Rng* dropout_rng,
                                  double dropout_rate) const {
    trace.acts.clear();
    trace.pool_src.assign(layers_.size(), {});
    trace.gn_xhat.assign(layers_.size(), {});
    trace.gn_istd.assign(layers_.size(), {});
    trace.acts.reserve(layers_.size() + 1);
    trace.acts.push_back(input);

    for (size_t li = 0; li < layers_.size(); ++li) {
        const LayerDef& l = layers_[li];
        const Volume& in = trace.acts.back();
        Volume out;
        switch (l.type) {
            case LT::conv3:
                out = Volume(l.out_c, in.h, in.w);
                conv3_forward(in, out, &params_[l.w_off], &params_[l.b_off]);
                break;
            case LT::conv1:
                out = Volume(l.out_c, in.h, in.w);
                conv1_forward(in, out, &params_[l.w_off], &params_[l.b_off]);
                break;
            case LT::dwconv3:
                out = Volume(l.out_c, in.h, in.w);
                dwconv3_forward(in, out, &params_[l.w_off], &params_[l.b_off]);
                break;
            case LT::groupnorm: {
                out = Volume(in.c, in.h, in.w);
                auto& xhat = trace.gn_xhat[li];
                auto& istd = trace.gn_istd[li];
                xhat.resize(in.size());
                istd.resize(static_cast<size_t>(l.groups));
                const size_t plane = static_cast<size_t>(in.h) * in.w;
                const size_t gsize = static_cast<size_t>(in.c / l.groups) * plane;
                for (int g = 0; g < l.groups; ++g) {
                    const double* ip = &in.v[g * gsize];
                    double mean = 0.0;
                    for (size_t i = 0; i < gsize; ++i) mean += ip[i];
                    mean /= static_cast<double>(gsize);
                    double var = 0.0;
                    for (size_t i = 0; i < gsize; ++i) {
                        var += (ip[i] - mean) * (ip[i] - mean);
                    }
                    var /= static_cast<double>(gsize);
                    const double inv = 1.0 / std::sqrt(var + kGnEps);
                    istd[static_cast<size_t>(g)] = inv;
                    double* xh = &xhat[g * gsize];
                    for (size_t i = 0; i < gsize; ++i) xh[i] = (ip[i] - mean) * inv;
                }
                for (int c = 0; c < in.c; ++c) {
                    const double gamma = params_[l.w_off + c];
                    const double beta = params_[l.b_off + c];
                    const double* xh = &xhat[c * plane];
                    double* op = &out.v[c * plane];
                    for (size_t i = 0; i < plane; ++i) op[i] = gamma * xh[i] + beta;
                }
                break;
            }
            case LT::relu:
                out = in;
                for (double& x : out.v) x = x > 0.0 ? x : 0.0;
                break;
            case LT::maxpool2: {
                out = Volume(in.c, in.h / 2, in.w / 2);
                auto& src = trace.pool_src[li];
                src.resize(out.size());
                size_t oi = 0;
                for (int c = 0; c < in.c; ++c) {
                    for (int y = 0; y < out.h; ++y) {
                        for (int x = 0; x < out.w; ++x, ++oi) {
                            int best_idx = (c * in.h + 2 * y) * in.w + 2 * x;
                            double best = in.v[static_cast<size_t>(best_idx)];
                            for (int dy = 0; dy < 2; ++dy) {
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int idx =
                                        (c * in.h + 2 * y + dy) * in.w + 2 * x + dx;
                                    const double val = in.v[static_cast<size_t>(idx)];
                                    if (val > best) {
                                        best = val;
                                        best_idx = idx;
                                    }
                                }
                            }
                            out.v[oi] = best;
                            src[oi] = best_idx;
                        }
                    }
                }
                break;
            }
            case LT::gap: {
                out = Volume(in.c, 1, 1);
                const size_t plane = static_cast<size_t>(in.h) * in.w;
                for (int c = 0; c < in.c; ++c) {
                    double acc = 0.0;
                    const double* ip = &in.v[c * plane];
                    for (size_t i = 0; i < plane; ++i) acc += ip[i];
                    out.v[static_cast<size_t>(c)] = acc / static_cast<double>(plane);
                }
                break;
            }
        }
        trace.acts.push_back(std::move(out));
    }

    trace.rep = trace.acts.back().v;
    if (dropout_rng != nullptr && dropout_rate > 0.0) {
        trace.drop_mask.resize(trace.rep.size());
        const double keep_scale = 1.0 / (1.0 - dropout_rate);
        for (double& m : trace.drop_mask) {
            m = dropout_rng->uniform01() < dropout_rate ? 0.0 : keep_scale;
        }
        trace.rep_dropped.resize(trace.rep.size());
        for (size_t i = 0; i < trace.rep.size(); ++i) {
            trace.rep_dropped[i] = trace.rep[i] * trace.drop_mask[i];
        }
    } else {
        trace.drop_mask.clear();
        trace.rep_dropped = trace.rep;
    }

    const int d = rep_dim_;
    trace.class_logits.assign(static_cast<size_t>(n_classes_), 0.0);
    for (int k = 0; k < n_classes_; ++k) {
        double acc = params_[class_b_off_ + k];
        const double* wrow = &params_[class_w_off_ + static_cast<size_t>(k) * d];
        for (int j = 0; j < d; ++j) acc += wrow[j] * trace.rep_dropped[static_cast<size_t>(j)];
        trace.class_logits[static_cast<size_t>(k)] = acc;
    }
    trace.xform_logits.assign(kNumAppearanceKinds, 0.0);
    for (int k = 0; k < kNumAppearanceKinds; ++k) {
        double acc = params_[xform_b_off_ + k];
        const double* wrow = &params_[xform_w_off_ + static_cast<size_t>(k) * d];
        for (int j = 0; j < d; ++j) acc += wrow[j] * trace.rep[static_cast<size_t>(j)];
        trace.xform_logits[static_cast<size_t>(k)] = acc;
    }
}

void TwoHeadModel::backward_volume(Trace& trace, std::span<const double> dlogits_class,
                                   std::span<const double> dlogits_xform,
                                   std::vector<double>& grad) const {
    const int d = rep_dim_;
    std::vector<double> drep(static_cast<size_t>(d), 0.0);

    for (int k = 0; k < n_classes_; ++k) {
        const double g = dlogits_class[static_cast<size_t>(k)];
        const size_t row = class_w_off_ + static_cast<size_t>(k) * d;
        grad[class_b_off_ + k] += g;
        for (int j = 0; j < d; ++j) {
            grad[row + j] += g * trace.rep_dropped[static_cast<size_t>(j)];
        }
    }
    // Through the dropout mask back onto the shared representation.
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int k = 0; k < n_classes_; ++k) {
            acc += dlogits_class[static_cast<size_t>(k)] *
                   params_[class_w_off_ + static_cast<size_t>(k) * d + j];
        }
        if (!trace.drop_mask.empty()) acc *= trace.drop_mask[static_cast<size_t>(j)];
        drep[static_cast<size_t>(j)] = acc;
    }

    for (int k = 0; k < kNumAppearanceKinds; ++k) {
        const double g = dlogits_xform[static_cast<size_t>(k)];
        const size_t row = xform_w_off_ + static_cast<size_t>(k) * d;
        grad[xform_b_off_ + k] += g;
        for (int j = 0; j < d; ++j) {
            grad[row + j] += g * trace.rep[static_cast<size_t>(j)];
        }
    }
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int k = 0; k < kNumAppearanceKinds; ++k) {
            acc += dlogits_xform[static_cast<size_t>(k)] *
                   params_[xform_w_off_ + static_cast<size_t>(k) * d + j];
        }
        drep[static_cast<size_t>(j)] += acc;
    }

    Volume dvol(rep_dim_, 1, 1);
    dvol.v = drep;
    for (size_t li = layers_.size(); li-- > 0;) {
        const LayerDef& l = layers_[li];
        const Volume& in = trace.acts[li];
        const Volume& out = trace.acts[li + 1];
        Volume din(in.c, in.h, in.w);
        switch (l.type) {
            case LT::conv3:
                conv3_backward(in, dvol, din, &params_[l.w_off], &grad[l.w_off], &grad[l.b_off]);
                break;
            case LT::conv1:
                conv1_backward(in, dvol, din, &params_[l.w_off], &grad[l.w_off], &grad[l.b_off]);
                break;
            case LT::dwconv3:
                dwconv3_backward(in, dvol, din, &params_[l.w_off], &grad[l.w_off],
                                 &grad[l.b_off]);
                break;
            case LT::groupnorm: {
                const auto& xhat = trace.gn_xhat[li];
                const auto& istd = trace.gn_istd[li];
                const size_t plane = static_cast<size_t>(in.h) * in.w;
                const size_t gsize = static_cast<size_t>(in.c / l.groups) * plane;
                // dxhat = dout * gamma, folded into the group reduction.
                for (int c = 0; c < in.c; ++c) {
                    const double* dop = &dvol.v[c * plane];
                    const double* xh = &xhat[c * plane];
                    double dgamma = 0.0;
                    double dbeta = 0.0;
                    for (size_t i = 0; i < plane; ++i) {
                        dgamma += dop[i] * xh[i];
                        dbeta += dop[i];
                    }
                    grad[l.w_off + c] += dgamma;
                    grad[l.b_off + c] += dbeta;
                }
                const int cpg = in.c / l.groups;
                for (int g = 0; g < l.groups; ++g) {
                    double m1 = 0.0;  // mean of dxhat
                    double m2 = 0.0;  // mean of dxhat * xhat
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int c = g * cpg + cc;
                        const double gamma = params_[l.w_off + c];
                        const double* dop = &dvol.v[c * plane];
                        const double* xh = &xhat[c * plane];
                        for (size_t i = 0; i < plane; ++i) {
                            m1 += dop[i] * gamma;
                            m2 += dop[i] * gamma * xh[i];
                        }
                    }
                    m1 /= static_cast<double>(gsize);
                    m2 /= static_cast<double>(gsize);
                    const double inv = istd[static_cast<size_t>(g)];
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int c = g * cpg + cc;
                        const double gamma = params_[l.w_off + c];
                        const double* dop = &dvol.v[c * plane];
                        const double* xh = &xhat[c * plane];
                        double* dip = &din.v[c * plane];
                        for (size_t i = 0; i < plane; ++i) {
                            dip[i] = inv * (dop[i] * gamma - m1 - xh[i] * m2);
                        }
                    }
                }
                break;
            }
            case LT::relu:
                for (size_t i = 0; i < out.size(); ++i) {
                    din.v[i] = out.v[i] > 0.0 ? dvol.v[i] : 0.0;
                }
                break;
            case LT::maxpool2: {
                const auto& src = trace.pool_src[li];
                for (size_t i = 0; i < src.size(); ++i) {
                    din.v[static_cast<size_t>(src[i])] += dvol.v[i];
                }
                break;
            }
            case LT::gap: {
                const size_t plane = static_cast<size_t>(in.h) * in.w;
                for (int c = 0; c < in.c; ++c) {
                    const double g = dvol.v[static_cast<size_t>(c)] / static_cast<double>(plane);
                    double* dip = &din.v[c * plane];
                    for (size_t i = 0; i < plane; ++i) dip[i] = g;
                }
                break;
            }
        }
        dvol = std::move(din);
    }
}

namespace {

void fill_output(BatchOutput& out, size_t i, const std::vector<double>& class_logits,
                 const std::vector<double>& xform_logits, int n) {
    std::copy(class_logits.begin(), class_logits.end(),
              out.class_logits.begin() + static_cast<long>(i * n));
    std::copy(xform_logits.begin(), xform_logits.end(),
              out.xform_logits.begin() + static_cast<long>(i * kNumAppearanceKinds));
}

}  // namespace

BatchOutput TwoHeadModel::forward(std::span<const ImageTile> tiles) const {
    BatchOutput out;
    out.batch = tiles.size();
    out.n_classes = n_classes_;
    out.class_logits.assign(tiles.size() * n_classes_, 0.0);
    out.xform_logits.assign(tiles.size() * kNumAppearanceKinds, 0.0);
    Trace trace;
    for (size_t i = 0; i < tiles.size(); ++i) {
        forward_volume(tile_to_input(tiles[i]), trace, nullptr, 0.0);
        fill_output(out, i, trace.class_logits, trace.xform_logits, n_classes_);
    }
    out.class_probs = softmax_rows(out.class_logits, out.batch, n_classes_);
    out.xform_probs = softmax_rows(out.xform_logits, out.batch, kNumAppearanceKinds);
    return out;
}

BatchOutput TwoHeadModel::forward_dropout(std::span<const ImageTile> tiles, Rng& rng,
                                          std::optional<double> rate_override) const {
    const double rate = rate_override.value_or(dropout_rate_);
    BatchOutput out;
    out.batch = tiles.size();
    out.n_classes = n_classes_;
    out.class_logits.assign(tiles.size() * n_classes_, 0.0);
    out.xform_logits.assign(tiles.size() * kNumAppearanceKinds, 0.0);
    Trace trace;
    for (size_t i = 0; i < tiles.size(); ++i) {
        forward_volume(tile_to_input(tiles[i]), trace, &rng, rate);
        fill_output(out, i, trace.class_logits, trace.xform_logits, n_classes_);
    }
    out.class_probs = softmax_rows(out.class_logits, out.batch, n_classes_);
    out.xform_probs = softmax_rows(out.xform_logits, out.batch, kNumAppearanceKinds);
    return out;
}

std::pair<double, double> TwoHeadModel::loss_and_grad(const TrainBatch& batch, double lambda,
                                                      Rng* dropout_rng,
                                                      std::vector<double>& grad) const {
    const size_t b = batch.samples.size();
    if (b == 0) throw std::invalid_argument("loss_and_grad: empty batch");
    if (grad.size() != params_.size()) {
        throw std::invalid_argument("loss_and_grad: grad buffer size mismatch");
    }
    double loss_c = 0.0;
    double loss_x = 0.0;
    Trace trace;
    std::vector<double> dlc(static_cast<size_t>(n_classes_));
    std::vector<double> dlx(kNumAppearanceKinds);
    for (const TrainSample& s : batch.samples) {
        if (s.class_label < 0 || s.class_label >= n_classes_) {
            throw std::invalid_argument("class label out of range");
        }
        if (s.xform_label < 0 || s.xform_label >= kNumAppearanceKinds) {
            throw std::invalid_argument("transform label out of range");
        }
        forward_volume(tile_to_input(s.tile), trace, dropout_rng,
                       dropout_rng ? dropout_rate_ : 0.0);
        loss_c += cross_entropy(trace.class_logits.data(), n_classes_, s.class_label);
        loss_x += cross_entropy(trace.xform_logits.data(), kNumAppearanceKinds, s.xform_label);

        const auto cp = softmax_rows(trace.class_logits, 1, n_classes_);
        const auto xp = softmax_rows(trace.xform_logits, 1, kNumAppearanceKinds);
        for (int k = 0; k < n_classes_; ++k) {
            dlc[static_cast<size_t>(k)] =
                (cp[static_cast<size_t>(k)] - (k == s.class_label ? 1.0 : 0.0)) /
                static_cast<double>(b);
        }
        for (int k = 0; k < kNumAppearanceKinds; ++k) {
            dlx[static_cast<size_t>(k)] =
                lambda * (xp[static_cast<size_t>(k)] - (k == s.xform_label ? 1.0 : 0.0)) /
                static_cast<double>(b);
        }
        backward_volume(trace, dlc, dlx, grad);
    }
    return {loss_c / static_cast<double>(b), loss_x / static_cast<double>(b)};
}

std::pair<double, double> TwoHeadModel::loss_only(const TrainBatch& batch) const {
    const size_t b = batch.samples.size();
    if (b == 0) throw std::invalid_argument("loss_only: empty batch");
    double loss_c = 0.0;
    double loss_x = 0.0;
    Trace trace;
    for (const TrainSample& s : batch.samples) {
        forward_volume(tile_to_input(s.tile), trace, nullptr, 0.0);
        loss_c += cross_entropy(trace.class_logits.data(), n_classes_, s.class_label);
        loss_x += cross_entropy(trace.xform_logits.data(), kNumAppearanceKinds, s.xform_label);
    }
    return {loss_c / static_cast<double>(b), loss_x / static_cast<double>(b)};
}

double evaluate_accuracy(const TwoHeadModel& model, const EvalBatchFn& stream) {
    size_t hits = 0;
    size_t total = 0;
    EvalBatch batch;
    while (stream(batch)) {
        const BatchOutput out = model.forward(batch.tiles);
        for (size_t i = 0; i < out.batch; ++i) {
            const auto row = out.class_prob_row(i);
            const int pred = static_cast<int>(
                std::max_element(row.begin(), row.end()) - row.begin());
            if (pred == batch.labels[i]) ++hits;
            ++total;
        }
    }
    if (total == 0) throw DataError("evaluate_accuracy: empty stream");
    return static_cast<double>(hits) / static_cast<double>(total);
}

FitResult fit(TwoHeadModel& model, const TrainEpochFactory& train_epochs,
              const EvalStreamFactory& val_stream, const TrainConfig& cfg,
              size_t steps_per_epoch) {
    if (cfg.epochs < 1) throw std::invalid_argument("fit: epochs must be >= 1");
    if (cfg.lambda < 0.0) throw std::invalid_argument("fit: lambda must be >= 0");
    if (steps_per_epoch < 1) throw std::invalid_argument("fit: steps_per_epoch must be >= 1");

    auto& params = model.params();
    std::vector<double> grad(params.size(), 0.0);
    std::vector<double> m(params.size(), 0.0);
    std::vector<double> v(params.size(), 0.0);

    const long cycle_epochs = std::max(1L, static_cast<long>(cfg.epochs) / 4);
    const long steps_per_cycle = cycle_epochs * static_cast<long>(steps_per_epoch);

    FitResult result;
    double best_acc = -1.0;
    std::vector<double> best_params;
    int best_epoch = 0;

    long global_step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        TrainBatchFn next = train_epochs(epoch);
        Rng dropout_rng(mix_seed(cfg.seed, "dropout", static_cast<uint64_t>(epoch)));
        double sum_lc = 0.0;
        double sum_lx = 0.0;
        int n_batches = 0;
        double first_lr = cyclical_lr(global_step, steps_per_cycle, cfg.base_lr);
        TrainBatch batch;
        while (next(batch)) {
            const double lr = cyclical_lr(global_step, steps_per_cycle, cfg.base_lr);
            std::fill(grad.begin(), grad.end(), 0.0);
            const auto [lc, lx] = model.loss_and_grad(
                batch, cfg.lambda, model.dropout_rate() > 0.0 ? &dropout_rng : nullptr, grad);
            if (!std::isfinite(lc) || !std::isfinite(lx)) {
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                                        ", batch " + std::to_string(n_batches) +
                                        " (class=" + std::to_string(lc) +
                                        ", xform=" + std::to_string(lx) + ")",
                                    epoch, n_batches, lc, lx);
            }
            ++global_step;
            const double t = static_cast<double>(global_step);
            const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
            const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
            for (size_t i = 0; i < params.size(); ++i) {
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
                params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
            }
            sum_lc += lc;
            sum_lx += lx;
            ++n_batches;
        }
        if (n_batches == 0) throw TrainingError("empty training epoch", epoch, 0, 0.0, 0.0);

        const double val_acc = evaluate_accuracy(model, val_stream());
        result.log.push_back({epoch, first_lr, sum_lc / n_batches, sum_lx / n_batches, val_acc});
        if (val_acc > best_acc) {
            best_acc = val_acc;
            best_params = params;
            best_epoch = epoch;
        }
    }

    result.best.arch = model.backbone().arch;
    result.best.pretrained = model.backbone().pretrained;
    result.best.n_classes = model.n_classes();
    result.best.class_names = model.class_names();
    result.best.dropout_rate = model.dropout_rate();
    result.best.epoch = best_epoch;
    result.best.val_acc = best_acc;
    result.best.params = std::move(best_params);
    return result;
}

void save_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw DataError("cannot write training log " + file.string());
    out << "epoch,lr,loss_class,loss_xform,val_acc\n";
    out.precision(17);
    for (const EpochLog& row : log) {
        out << row.epoch << "," << row.lr << "," << row.loss_class << "," << row.loss_xform
            << "," << row.val_acc << "\n";
    }
}

namespace {
constexpr const char* kCheckpointMagic = "T3PO-CKPT v1";
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + file.string());
    json header;
    header["arch"] = ckpt.arch;
    header["pretrained"] = ckpt.pretrained;
    header["n_classes"] = ckpt.n_classes;
    header["class_names"] = ckpt.class_names;
    header["dropout_rate"] = ckpt.dropout_rate;
    header["epoch"] = ckpt.epoch;
    header["val_acc"] = ckpt.val_acc;
    header["config_hash"] = ckpt.config_hash;
    header["param_count"] = ckpt.params.size();
    out << kCheckpointMagic << "\n" << header.dump() << "\n";
    out.write(reinterpret_cast<const char*>(ckpt.params.data()),
              static_cast<std::streamsize>(ckpt.params.size() * sizeof(double)));
    if (!out) throw DataError("failed writing checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + file.string());
    std::string magic;
    std::getline(in, magic);
    if (magic != kCheckpointMagic) throw DataError("not a checkpoint file: " + file.string());
    std::string header_line;
    std::getline(in, header_line);
    Checkpoint ckpt;
    try {
        const json header = json::parse(header_line);
        ckpt.arch = header.at("arch").get<std::string>();
        ckpt.pretrained = header.value("pretrained", false);
        ckpt.n_classes = header.at("n_classes").get<int>();
        ckpt.class_names = header.at("class_names").get<std::vector<std::string>>();
        ckpt.dropout_rate = header.at("dropout_rate").get<double>();
        ckpt.epoch = header.at("epoch").get<int>();
        ckpt.val_acc = header.at("val_acc").get<double>();
        ckpt.config_hash = header.value("config_hash", "");
        ckpt.params.resize(header.at("param_count").get<size_t>());
    } catch (const json::exception& e) {
        throw DataError("checkpoint header " + file.string() + ": " + e.what());
    }
    in.read(reinterpret_cast<char*>(ckpt.params.data()),
            static_cast<std::streamsize>(ckpt.params.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(ckpt.params.size() * sizeof(double))) {
        throw DataError("truncated checkpoint " + file.string());
    }
    return ckpt;
}

TwoHeadModel model_from_checkpoint(const Checkpoint& ckpt) {
    BackboneSpec spec;
    spec.arch = ckpt.arch;
    spec.pretrained = ckpt.pretrained;
    TwoHeadModel model(spec, ckpt.n_classes, ckpt.class_names, ckpt.dropout_rate, 0);
    if (model.params().size() != ckpt.params.size()) {
        throw ConsistencyError("checkpoint parameter count does not match architecture");
    }
    model.params() = ckpt.params;
    return model;
}

}  // namespace t3po
