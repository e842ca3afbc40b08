#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "t3po/image.hpp"
#include "t3po/rng.hpp"

namespace t3po {

enum class TransformFamily { appearance, geometric };

// Appearance kinds are listed in label order; transform_label() relies on it.
enum class TransformKind {
    identity,
    brightness,
    contrast,
    saturation,
    hue,
    gamma,
    sharpness,
    rotate,
    shear_x,
    shear_y,
    translate_x,
    translate_y,
    identity_geom,
};

inline constexpr int kNumAppearanceKinds = 7;

TransformFamily family_of(TransformKind kind);
std::string_view kind_name(TransformKind kind);
std::optional<TransformKind> kind_from_name(std::string_view name);

// One concrete transform. Strength units depend on the kind: blend factor
// for Brightness/Contrast/Saturation/Sharpness, hue shift in turns, gamma
// exponent, degrees for Rotate, shear factor, and fraction of the side
// length for Translate. Identity kinds carry strength 0.
struct TransformSpec {
    TransformFamily family = TransformFamily::appearance;
    TransformKind kind = TransformKind::identity;
    double strength = 0.0;
};

// Sampling range for one kind. Strengths inside (identity - margin,
// identity + margin) are never drawn, so non-identity labels stay
// distinguishable from Identity.
struct StrengthRange {
    double lo = 0.0;
    double hi = 0.0;
    double identity = 0.0;
    double margin = 0.0;
    bool log_scale = false;
};

// The decoupled transform space T = T_geom | T_app. The appearance kind
// order is fixed: it defines the pretext labels.
class TransformSpace {
public:
    static TransformSpace standard();

    const std::vector<TransformKind>& appearance_kinds() const { return appearance_; }
    const std::vector<TransformKind>& geometric_kinds() const { return geometric_; }
    const StrengthRange& range(TransformKind kind) const;

    // Sampling subset for experiments and tests; ranges are preserved.
    TransformSpace restricted_to(const std::vector<TransformKind>& kinds) const;

private:
    std::vector<TransformKind> appearance_;
    std::vector<TransformKind> geometric_;
    std::array<StrengthRange, 13> ranges_{};
};

// Uniform kind from the family's list; strength uniform (Gamma:
// log-uniform) over the kind's range minus the identity-exclusion band.
TransformSpec sample_transform(Rng& rng, const TransformSpace& space, TransformFamily family);

// Color semantics on [0,1]-normalized channels, one round-half-up
// quantization at the end. Rejects geometric specs.
ImageTile apply_appearance(const ImageTile& tile, const TransformSpec& spec);

// Affine warp, bilinear resampling, reflected borders; output geometry
// equals input geometry. Rejects appearance specs.
ImageTile apply_geometric(const ImageTile& tile, const TransformSpec& spec);

ImageTile apply_transform(const ImageTile& tile, const TransformSpec& spec);

// Identity -> 0 ... Sharpness -> 6; bijective on appearance kinds.
int transform_label(const TransformSpec& spec);
TransformKind kind_of_label(int label);

}  // namespace t3po
