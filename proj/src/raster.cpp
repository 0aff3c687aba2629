#include "osdbench/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "osdbench/common.hpp"

namespace osd {

bool Raster::all_zero() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return v == 0.0f; });
}

void write_pgm(const std::string& path, const Raster& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            float v = std::clamp(img.at(x, y), 0.0f, 1.0f);
            row[static_cast<std::size_t>(x)] =
                static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        out.write(reinterpret_cast<const char*>(row.data()), img.width);
    }
    if (!out) throw Error("short write: " + path);
}

namespace {

int next_pgm_token(std::istream& in) {
    // Skips whitespace and '#' comments per the PGM grammar.
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = -1;
    in >> value;
    return value;
}

}  // namespace

Raster read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open: " + path);
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") throw ParseError("not a binary PGM (P5): " + path);
    int w = next_pgm_token(in);
    int h = next_pgm_token(in);
    int maxval = next_pgm_token(in);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw ParseError("bad PGM header: " + path);
    in.get();  // single whitespace before pixel data
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParseError("truncated PGM pixel data: " + path);
    Raster img(w, h);
    const float scale = 1.0f / static_cast<float>(maxval);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] * scale;
    return img;
}

float sample_bilinear(const Raster& img, double x, double y) {
    // Pixel centers sit at integer coordinates.
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    double fx = x - x0;
    double fy = y - y0;
    auto px = [&](int xi, int yi) -> double {
        if (xi < 0 || yi < 0 || xi >= img.width || yi >= img.height) return 0.0;
        return img.at(xi, yi);
    };
    double v0 = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    double v1 = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    return static_cast<float>(v0 * (1.0 - fy) + v1 * fy);
}

Raster resample_square(const Raster& src, double cx, double cy, double half, int out_res) {
    Raster out(out_res, out_res);
    const double step = 2.0 * half / out_res;
    for (int oy = 0; oy < out_res; ++oy) {
        for (int ox = 0; ox < out_res; ++ox) {
            double sx = cx - half + (ox + 0.5) * step - 0.5;
            double sy = cy - half + (oy + 0.5) * step - 0.5;
            out.at(ox, oy) = sample_bilinear(src, sx, sy);
        }
    }
    return out;
}

}  // namespace osd
