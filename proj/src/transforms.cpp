#include "t3po/transforms.hpp"

#include <cmath>
#include <stdexcept>

#include "t3po/errors.hpp"

namespace t3po {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct KindInfo {
    TransformKind kind;
    TransformFamily family;
    std::string_view name;
};

constexpr std::array<KindInfo, 13> kKinds = {{
    {TransformKind::identity, TransformFamily::appearance, "identity"},
    {TransformKind::brightness, TransformFamily::appearance, "brightness"},
    {TransformKind::contrast, TransformFamily::appearance, "contrast"},
    {TransformKind::saturation, TransformFamily::appearance, "saturation"},
    {TransformKind::hue, TransformFamily::appearance, "hue"},
    {TransformKind::gamma, TransformFamily::appearance, "gamma"},
    {TransformKind::sharpness, TransformFamily::appearance, "sharpness"},
    {TransformKind::rotate, TransformFamily::geometric, "rotate"},
    {TransformKind::shear_x, TransformFamily::geometric, "shear_x"},
    {TransformKind::shear_y, TransformFamily::geometric, "shear_y"},
    {TransformKind::translate_x, TransformFamily::geometric, "translate_x"},
    {TransformKind::translate_y, TransformFamily::geometric, "translate_y"},
    {TransformKind::identity_geom, TransformFamily::geometric, "identity_geom"},
}};

size_t kind_index(TransformKind kind) { return static_cast<size_t>(kind); }

}  // namespace

TransformFamily family_of(TransformKind kind) { return kKinds[kind_index(kind)].family; }

std::string_view kind_name(TransformKind kind) { return kKinds[kind_index(kind)].name; }

std::optional<TransformKind> kind_from_name(std::string_view name) {
    for (const auto& info : kKinds) {
        if (info.name == name) return info.kind;
    }
    return std::nullopt;
}

TransformSpace TransformSpace::standard() {
    TransformSpace space;
    space.appearance_ = {TransformKind::identity,   TransformKind::brightness,
                         TransformKind::contrast,   TransformKind::saturation,
                         TransformKind::hue,        TransformKind::gamma,
                         TransformKind::sharpness};
    space.geometric_ = {TransformKind::rotate,      TransformKind::shear_x,
                        TransformKind::shear_y,     TransformKind::translate_x,
                        TransformKind::translate_y, TransformKind::identity_geom};

    // Exclusion margins keep every non-identity draw visibly different
    // from the untouched image; thin margins leave the pretext task full
    // of near-identity samples the head cannot separate.
    auto set = [&](TransformKind kind, StrengthRange r) { space.ranges_[kind_index(kind)] = r; };
    // Contrast and saturation only strengthen and gamma only darkens: the
    // weakening/brightening directions would let washed-out, chroma-free
    // images be explained as an in-space transform, which breaks open-set
    // scoring on desaturated inputs.
    set(TransformKind::identity, {0.0, 0.0, 0.0, 0.0, false});
    set(TransformKind::brightness, {0.5, 1.5, 1.0, 0.2, false});
    set(TransformKind::contrast, {1.0, 1.8, 1.0, 0.2, false});
    set(TransformKind::saturation, {1.0, 1.8, 1.0, 0.25, false});
    set(TransformKind::hue, {-0.25, 0.25, 0.0, 0.06, false});
    set(TransformKind::gamma, {1.0, 2.2, 1.0, 0.25, true});
    set(TransformKind::sharpness, {0.0, 2.0, 1.0, 0.5, false});
    set(TransformKind::rotate, {-30.0, 30.0, 0.0, 0.05, false});
    set(TransformKind::shear_x, {-0.2, 0.2, 0.0, 0.05, false});
    set(TransformKind::shear_y, {-0.2, 0.2, 0.0, 0.05, false});
    set(TransformKind::translate_x, {-0.15, 0.15, 0.0, 0.05, false});
    set(TransformKind::translate_y, {-0.15, 0.15, 0.0, 0.05, false});
    set(TransformKind::identity_geom, {0.0, 0.0, 0.0, 0.0, false});
    return space;
}

const StrengthRange& TransformSpace::range(TransformKind kind) const {
    return ranges_[kind_index(kind)];
}

TransformSpace TransformSpace::restricted_to(const std::vector<TransformKind>& kinds) const {
    TransformSpace out = *this;
    out.appearance_.clear();
    out.geometric_.clear();
    // Canonical order is preserved no matter how `kinds` is listed.
    for (TransformKind kind : appearance_) {
        for (TransformKind k : kinds) {
            if (k == kind) out.appearance_.push_back(kind);
        }
    }
    for (TransformKind kind : geometric_) {
        for (TransformKind k : kinds) {
            if (k == kind) out.geometric_.push_back(kind);
        }
    }
    return out;
}

TransformSpec sample_transform(Rng& rng, const TransformSpace& space, TransformFamily family) {
    const auto& kinds = family == TransformFamily::appearance ? space.appearance_kinds()
                                                              : space.geometric_kinds();
    if (kinds.empty()) throw std::invalid_argument("sample_transform: empty kind list");
    const TransformKind kind = kinds[rng.uniform_int(kinds.size())];
    const StrengthRange& r = space.range(kind);

    TransformSpec spec{family, kind, 0.0};
    if (kind == TransformKind::identity || kind == TransformKind::identity_geom) {
        return spec;
    }

    // Uniform over [lo, id-m] u [id+m, hi] in the sampling domain
    // (log domain for Gamma), weighted by interval length.
    auto fwd = [&](double x) { return r.log_scale ? std::log(x) : x; };
    auto inv = [&](double x) { return r.log_scale ? std::exp(x) : x; };
    const double lo = fwd(r.lo);
    const double hi = fwd(r.hi);
    const double a = fwd(r.identity - r.margin);
    const double b = fwd(r.identity + r.margin);
    const double left = std::max(0.0, a - lo);
    const double right = std::max(0.0, hi - b);
    const double u = rng.uniform01() * (left + right);
    spec.strength = inv(u < left ? lo + u : b + (u - left));
    return spec;
}

namespace {

void require_family(const TransformSpec& spec, TransformFamily family, const char* op) {
    if (spec.family != family || family_of(spec.kind) != family) {
        throw std::invalid_argument(std::string(op) + ": spec family mismatch for kind '" +
                                    std::string(kind_name(spec.kind)) + "'");
    }
}

double norm(uint8_t level) { return level / 255.0; }

double pixel_luma(const ImageTile& tile, int x, int y) {
    return luma(norm(tile.at(x, y, 0)), norm(tile.at(x, y, 1)), norm(tile.at(x, y, 2)));
}

// out = (1-f) * base + f * in, all in normalized reals, one quantization
// at the end. f == 1 reproduces the input bit-exactly because (1-f) is
// exactly zero.
template <typename BaseFn>
ImageTile blend_with(const ImageTile& tile, double f, BaseFn&& base) {
    ImageTile out(tile.width(), tile.height());
    for (int y = 0; y < tile.height(); ++y) {
        for (int x = 0; x < tile.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = (1.0 - f) * base(x, y, c) + f * norm(tile.at(x, y, c));
                out.at(x, y, c) = to_level(v);
            }
        }
    }
    return out;
}

double mean_luma(const ImageTile& tile) {
    double sum = 0.0;
    for (int y = 0; y < tile.height(); ++y) {
        for (int x = 0; x < tile.width(); ++x) {
            sum += pixel_luma(tile, x, y);
        }
    }
    return sum / (tile.width() * tile.height());
}

// 3x3 kernel [[1,1,1],[1,5,1],[1,1,1]] / 13 on interior pixels; border
// pixels keep the input value.
double smooth_value(const ImageTile& tile, int x, int y, int c) {
    if (x == 0 || y == 0 || x + 1 == tile.width() || y + 1 == tile.height()) {
        return norm(tile.at(x, y, c));
    }
    double acc = 0.0;
    for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
            const double w = (dx == 0 && dy == 0) ? 5.0 : 1.0;
            acc += w * norm(tile.at(x + dx, y + dy, c));
        }
    }
    return acc / 13.0;
}

ImageTile shift_hue(const ImageTile& tile, double delta) {
    ImageTile out(tile.width(), tile.height());
    for (int y = 0; y < tile.height(); ++y) {
        for (int x = 0; x < tile.width(); ++x) {
            double h, s, v;
            rgb_to_hsv(norm(tile.at(x, y, 0)), norm(tile.at(x, y, 1)), norm(tile.at(x, y, 2)),
                       h, s, v);
            h += delta;
            h -= std::floor(h);  // wrap to [0, 1)
            double r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            out.at(x, y, 0) = to_level(r);
            out.at(x, y, 1) = to_level(g);
            out.at(x, y, 2) = to_level(b);
        }
    }
    return out;
}

ImageTile apply_gamma(const ImageTile& tile, double gamma) {
    std::array<uint8_t, 256> lut;
    for (int i = 0; i < 256; ++i) {
        lut[static_cast<size_t>(i)] = to_level(std::pow(i / 255.0, gamma));
    }
    ImageTile out(tile.width(), tile.height());
    for (size_t i = 0; i < tile.data().size(); ++i) {
        out.data()[i] = lut[tile.data()[i]];
    }
    return out;
}

// Mirror across edge pixels without repeating them (..2,1,0 -> 1,2..).
int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

ImageTile affine_warp(const ImageTile& tile, double m00, double m01, double m10, double m11,
                      double tx, double ty) {
    const int w = tile.width();
    const int h = tile.height();
    const double cx = (w - 1) / 2.0;
    const double cy = (h - 1) / 2.0;
    ImageTile out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            // Source coordinates of this output pixel (inverse map about
            // the tile center).
            const double dx = x - cx - tx;
            const double dy = y - cy - ty;
            const double sx = cx + m00 * dx + m01 * dy;
            const double sy = cy + m10 * dx + m11 * dy;
            const double fx = std::floor(sx);
            const double fy = std::floor(sy);
            const double ax = sx - fx;
            const double ay = sy - fy;
            const int x0 = static_cast<int>(fx);
            const int y0 = static_cast<int>(fy);
            if (ax == 0.0 && ay == 0.0) {
                const int xs = reflect_index(x0, w);
                const int ys = reflect_index(y0, h);
                for (int c = 0; c < 3; ++c) out.at(x, y, c) = tile.at(xs, ys, c);
                continue;
            }
            const int x0r = reflect_index(x0, w);
            const int x1r = reflect_index(x0 + 1, w);
            const int y0r = reflect_index(y0, h);
            const int y1r = reflect_index(y0 + 1, h);
            for (int c = 0; c < 3; ++c) {
                const double v00 = norm(tile.at(x0r, y0r, c));
                const double v10 = norm(tile.at(x1r, y0r, c));
                const double v01 = norm(tile.at(x0r, y1r, c));
                const double v11 = norm(tile.at(x1r, y1r, c));
                const double v0 = v00 + ax * (v10 - v00);
                const double v1 = v01 + ax * (v11 - v01);
                out.at(x, y, c) = to_level(v0 + ay * (v1 - v0));
            }
        }
    }
    return out;
}

}  // namespace

ImageTile apply_appearance(const ImageTile& tile, const TransformSpec& spec) {
    require_family(spec, TransformFamily::appearance, "apply_appearance");
    const double f = spec.strength;
    switch (spec.kind) {
        case TransformKind::identity:
            return tile;
        case TransformKind::brightness:
            return blend_with(tile, f, [](int, int, int) { return 0.0; });
        case TransformKind::contrast: {
            const double g = mean_luma(tile);
            return blend_with(tile, f, [g](int, int, int) { return g; });
        }
        case TransformKind::saturation:
            return blend_with(tile, f,
                              [&](int x, int y, int) { return pixel_luma(tile, x, y); });
        case TransformKind::hue:
            return shift_hue(tile, f);
        case TransformKind::gamma:
            return apply_gamma(tile, f);
        case TransformKind::sharpness:
            return blend_with(tile, f,
                              [&](int x, int y, int c) { return smooth_value(tile, x, y, c); });
        default:
            throw std::invalid_argument("apply_appearance: not an appearance kind");
    }
}

ImageTile apply_geometric(const ImageTile& tile, const TransformSpec& spec) {
    require_family(spec, TransformFamily::geometric, "apply_geometric");
    const double s = spec.strength;
    switch (spec.kind) {
        case TransformKind::identity_geom:
            return tile;
        case TransformKind::rotate: {
            const double rad = s * kPi / 180.0;
            const double c = std::cos(rad);
            const double sn = std::sin(rad);
            // Inverse rotation; pure rotation so no extra translation.
            return affine_warp(tile, c, sn, -sn, c, 0.0, 0.0);
        }
        case TransformKind::shear_x:
            // Forward x' = x + s*(y - cy); inverse shears by -s.
            return affine_warp(tile, 1.0, -s, 0.0, 1.0, 0.0, 0.0);
        case TransformKind::shear_y:
            return affine_warp(tile, 1.0, 0.0, -s, 1.0, 0.0, 0.0);
        case TransformKind::translate_x:
            return affine_warp(tile, 1.0, 0.0, 0.0, 1.0, s * tile.width(), 0.0);
        case TransformKind::translate_y:
            return affine_warp(tile, 1.0, 0.0, 0.0, 1.0, 0.0, s * tile.height());
        default:
            throw std::invalid_argument("apply_geometric: not a geometric kind");
    }
}

ImageTile apply_transform(const ImageTile& tile, const TransformSpec& spec) {
    return spec.family == TransformFamily::appearance ? apply_appearance(tile, spec)
                                                      : apply_geometric(tile, spec);
}

int transform_label(const TransformSpec& spec) {
    require_family(spec, TransformFamily::appearance, "transform_label");
    return static_cast<int>(spec.kind);
}

TransformKind kind_of_label(int label) {
    if (label < 0 || label >= kNumAppearanceKinds) {
        throw std::invalid_argument("kind_of_label: label out of range");
    }
    return static_cast<TransformKind>(label);
}

}  // namespace t3po
