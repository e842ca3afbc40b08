#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace t3po {

// 8-bit RGB raster, row-major interleaved. The unit of classification.
// Minimum side is 8 px (sharpness kernel plus border).
class ImageTile {
public:
    ImageTile() = default;
    ImageTile(int width, int height);
    ImageTile(int width, int height, std::vector<uint8_t> data);

    int width() const { return width_; }
    int height() const { return height_; }
    static constexpr int channels() { return 3; }

    uint8_t at(int x, int y, int c) const {
        return data_[static_cast<size_t>((y * width_ + x) * 3 + c)];
    }
    uint8_t& at(int x, int y, int c) {
        return data_[static_cast<size_t>((y * width_ + x) * 3 + c)];
    }

    const std::vector<uint8_t>& data() const { return data_; }
    std::vector<uint8_t>& data() { return data_; }

    bool operator==(const ImageTile& other) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<uint8_t> data_;
};

// Binary PPM (P6, maxval 255). The only raster codec the library ships;
// the README documents lossless conversion from other formats.
ImageTile read_ppm(const std::filesystem::path& file);
void write_ppm(const ImageTile& tile, const std::filesystem::path& file);

// FNV-1a over dimensions and pixel bytes; golden-corpus fingerprint.
uint64_t tile_checksum(const ImageTile& tile);

// Rec. 601 luma of normalized channels: (299 r + 587 g + 114 b) / 1000.
double luma(double r, double g, double b);

// Mean HSV saturation over all pixels, in [0, 1].
double mean_saturation(const ImageTile& tile);

// hue/saturation/value in [0,1); round trips with hsv_to_rgb in exact
// arithmetic.
void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v);
void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b);

// Round-half-up to an 8-bit level, clamped to [0, 255]. The single
// quantization rule used by every transform.
uint8_t to_level(double v);

}  // namespace t3po
