#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cd {

// Interleaved row-major 8-bit raster, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
    int h = 0, w = 0, channels = 1;
    std::vector<uint8_t> v;

    ImageU8() = default;
    ImageU8(int h_, int w_, int c_)
        : h(h_), w(w_), channels(c_), v(static_cast<size_t>(h_) * w_ * c_, 0) {}
    uint8_t& at(int y, int x, int c) {
        return v[(static_cast<size_t>(y) * w + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return v[(static_cast<size_t>(y) * w + x) * channels + c];
    }
};

// Reads an 8-bit PNG. Palette images expand to RGB, 16-bit depth is reduced,
// alpha is dropped; the result has 1 or 3 channels.
ImageU8 read_png(const std::string& path);

// Writes gray (1 channel) or RGB (3 channels) 8-bit PNG.
void write_png(const std::string& path, const ImageU8& img);

}  // namespace cd
