#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace osd {

// Grayscale raster, row-major, values in [0, 1].
struct Raster {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    Raster() = default;
    Raster(int w, int h, float fill = 0.0f)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    bool empty() const { return data.empty(); }
    bool all_zero() const;

    bool operator==(const Raster&) const = default;
};

// Binary PGM (P5, maxval 255). Values are quantized to bytes on write.
void write_pgm(const std::string& path, const Raster& img);
Raster read_pgm(const std::string& path);

// Bilinear sample at continuous coordinates; out-of-bounds reads as 0.
float sample_bilinear(const Raster& img, double x, double y);

// Resample the axis-aligned source square [cx-half, cx+half)^2 to out_res x out_res.
Raster resample_square(const Raster& src, double cx, double cy, double half, int out_res);

}  // namespace osd
