#include "fat/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fat {

namespace {

constexpr double kMean[3] = {0.485, 0.456, 0.406};
constexpr double kStd[3] = {0.229, 0.224, 0.225};

// Reads the next whitespace-delimited token, skipping '#' comments.
std::string next_token(std::ifstream& f) {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
        if (c == '#') {
            while ((c = f.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

}  // namespace

Tensor load_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("ppm: cannot open " + path);
    if (next_token(f) != "P6") throw std::runtime_error("ppm: not a binary P6 file: " + path);
    const i64 w = std::stoll(next_token(f));
    const i64 h = std::stoll(next_token(f));
    const i64 maxval = std::stoll(next_token(f));
    if (maxval != 255) {
        throw std::runtime_error("ppm: unsupported maxval " + std::to_string(maxval));
    }
    std::vector<unsigned char> raw(static_cast<std::size_t>(3 * w * h));
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw std::runtime_error("ppm: truncated pixel data in " + path);
    Tensor img({1, 3, h, w});
    for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x)
            for (i64 c = 0; c < 3; ++c)
                img.at4(0, c, y, x) =
                    raw[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0;
    img.quantize();
    return img;
}

void save_ppm(const std::string& path, const Tensor& img) {
    const i64 h = img.dim(2), w = img.dim(3);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("ppm: cannot open " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x)
            for (i64 c = 0; c < 3; ++c) {
                const double v = std::clamp(img.at4(0, c, y, x), 0.0, 1.0);
                f.put(static_cast<char>(std::lround(v * 255.0)));
            }
}

Tensor resize_bilinear(const Tensor& img, i64 out_h, i64 out_w) {
    const i64 C = img.dim(1), H = img.dim(2), W = img.dim(3);
    if (H == out_h && W == out_w) return img;
    Tensor out({1, C, out_h, out_w}, img.precision());
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (i64 c = 0; c < C; ++c)
        for (i64 y = 0; y < out_h; ++y) {
            const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            const i64 y0 = std::clamp<i64>(static_cast<i64>(std::floor(fy)), 0, H - 1);
            const i64 y1 = std::min<i64>(y0 + 1, H - 1);
            const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
            for (i64 x = 0; x < out_w; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                const i64 x0 =
                    std::clamp<i64>(static_cast<i64>(std::floor(fx)), 0, W - 1);
                const i64 x1 = std::min<i64>(x0 + 1, W - 1);
                const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
                const double v =
                    (1.0 - wy) * ((1.0 - wx) * img.at4(0, c, y0, x0) +
                                  wx * img.at4(0, c, y0, x1)) +
                    wy * ((1.0 - wx) * img.at4(0, c, y1, x0) +
                          wx * img.at4(0, c, y1, x1));
                out.at4(0, c, y, x) = v;
            }
        }
    out.quantize();
    return out;
}

void normalize_imagenet(Tensor& img) {
    const i64 HW = img.dim(2) * img.dim(3);
    for (i64 c = 0; c < 3; ++c) {
        double* p = img.data() + c * HW;
        for (i64 i = 0; i < HW; ++i) p[i] = (p[i] - kMean[c]) / kStd[c];
    }
    img.quantize();
}

Tensor load_image_ppm(const std::string& path, i64 resize_to, bool normalize) {
    Tensor img = load_ppm(path);
    if (resize_to > 0) img = resize_bilinear(img, resize_to, resize_to);
    if (normalize) normalize_imagenet(img);
    return img;
}

}  // namespace fat
