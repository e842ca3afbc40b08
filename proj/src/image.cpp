#include "t3po/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "t3po/errors.hpp"
#include "t3po/hash.hpp"

namespace t3po {

namespace {
constexpr int kMinSide = 8;

void check_geometry(int width, int height) {
    if (width < kMinSide || height < kMinSide) {
        throw DataError("tile sides must be at least 8 px, got " + std::to_string(width) +
                        "x" + std::to_string(height));
    }
}
}  // namespace

ImageTile::ImageTile(int width, int height)
    : width_(width), height_(height), data_(static_cast<size_t>(width) * height * 3, 0) {
    check_geometry(width, height);
}

ImageTile::ImageTile(int width, int height, std::vector<uint8_t> data)
    : width_(width), height_(height), data_(std::move(data)) {
    check_geometry(width, height);
    if (data_.size() != static_cast<size_t>(width) * height * 3) {
        throw DataError("pixel buffer size does not match tile geometry");
    }
}

namespace {

// Skips whitespace and '#' comments between PPM header tokens.
int next_header_int(std::istream& in, const std::filesystem::path& file) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) {
        throw DataError("malformed PPM header in " + file.string());
    }
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        if (value > 1 << 20) throw DataError("implausible PPM dimension in " + file.string());
        c = in.get();
    }
    if (c != EOF) in.unget();
    return value;
}

}  // namespace

ImageTile read_ppm(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw DataError("not a binary PPM (P6): " + file.string());
    const int width = next_header_int(in, file);
    const int height = next_header_int(in, file);
    const int maxval = next_header_int(in, file);
    if (maxval != 255) throw DataError("only maxval 255 PPM supported: " + file.string());
    in.get();  // single whitespace byte before payload
    std::vector<uint8_t> data(static_cast<size_t>(width) * height * 3);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (in.gcount() != static_cast<std::streamsize>(data.size())) {
        throw DataError("truncated PPM payload: " + file.string());
    }
    return ImageTile(width, height, std::move(data));
}

void write_ppm(const ImageTile& tile, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + file.string());
    out << "P6\n" << tile.width() << " " << tile.height() << "\n255\n";
    out.write(reinterpret_cast<const char*>(tile.data().data()),
              static_cast<std::streamsize>(tile.data().size()));
    if (!out) throw DataError("failed writing " + file.string());
}

uint64_t tile_checksum(const ImageTile& tile) {
    char header[32];
    const int n = std::snprintf(header, sizeof header, "%dx%d:", tile.width(), tile.height());
    uint64_t h = fnv1a64(header, static_cast<size_t>(n));
    return fnv1a64(tile.data().data(), tile.data().size(), h);
}

double luma(double r, double g, double b) {
    return (299.0 * r + 587.0 * g + 114.0 * b) / 1000.0;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max(r, std::max(g, b));
    const double mn = std::min(r, std::min(g, b));
    const double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r) {
        h = (g - b) / d;
        if (h < 0.0) h += 6.0;
    } else if (mx == g) {
        h = (b - r) / d + 2.0;
    } else {
        h = (r - g) / d + 4.0;
    }
    h /= 6.0;
    if (h >= 1.0) h -= 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    if (s <= 0.0) {
        r = g = b = v;
        return;
    }
    double h6 = h * 6.0;
    if (h6 >= 6.0) h6 -= 6.0;
    const int i = static_cast<int>(h6);
    const double f = h6 - i;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

double mean_saturation(const ImageTile& tile) {
    double sum = 0.0;
    const int n = tile.width() * tile.height();
    for (int y = 0; y < tile.height(); ++y) {
        for (int x = 0; x < tile.width(); ++x) {
            double h, s, v;
            rgb_to_hsv(tile.at(x, y, 0) / 255.0, tile.at(x, y, 1) / 255.0,
                       tile.at(x, y, 2) / 255.0, h, s, v);
            sum += s;
        }
    }
    return sum / n;
}

uint8_t to_level(double v) {
    const double r = std::floor(v * 255.0 + 0.5);
    if (r <= 0.0) return 0;
    if (r >= 255.0) return 255;
    return static_cast<uint8_t>(r);
}

}  // namespace t3po
