#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbt/common.hpp"

namespace mbt {

/// 8-bit RGB raster. Samples are interleaved row-major (r,g,b per pixel).
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0) {}

    std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }

    bool operator==(const Image& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

/// byte -> float in [0,1]
inline double sample_to_float(std::uint8_t b) { return static_cast<double>(b) / 255.0; }

/// float in [0,1] -> byte, round-half-away-from-zero after clamping.
inline std::uint8_t float_to_sample(double v) {
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    const double scaled = v * 255.0;
    return static_cast<std::uint8_t>(scaled + 0.5);  // scaled >= 0, so +0.5 rounds half away
}

/// Binary PPM (P6, maxval 255). Throws FormatError on malformed input.
Image read_ppm(const std::string& path);
void write_ppm(const Image& img, const std::string& path);

}  // namespace mbt
