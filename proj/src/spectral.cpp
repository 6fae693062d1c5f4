#include "fat/spectral.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fat {

Spectrum dft2_magnitude(const Tensor& x, bool log_scale) {
    if (x.rank() != 2) {
        throw std::invalid_argument("dft2: expected [H,W] tensor, got " +
                                    x.shape_str());
    }
    const i64 H = x.dim(0), W = x.dim(1);
    Spectrum s;
    s.height = H;
    s.width = W;
    s.log_scaled = log_scale;
    s.magnitude.assign(static_cast<std::size_t>(H * W), 0.0);
    const double two_pi = 6.283185307179586476925286766559;
    for (i64 u = 0; u < H; ++u) {
        for (i64 v = 0; v < W; ++v) {
            double re = 0.0, im = 0.0;
            for (i64 y = 0; y < H; ++y) {
                for (i64 xx = 0; xx < W; ++xx) {
                    const double ang =
                        -two_pi * (static_cast<double>(u * y) / H +
                                   static_cast<double>(v * xx) / W);
                    const double val = x[y * W + xx];
                    re += val * std::cos(ang);
                    im += val * std::sin(ang);
                }
            }
            // Quadrant swap: bin (u,v) lands at the centered position.
            const i64 cu = (u + H / 2) % H;
            const i64 cv = (v + W / 2) % W;
            double m = std::sqrt(re * re + im * im);
            if (log_scale) m = std::log1p(m);
            s.magnitude[static_cast<std::size_t>(cu * W + cv)] = m;
        }
    }
    return s;
}

double parseval_input_energy(const Tensor& x) {
    double e = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) e += x[i] * x[i];
    return e;
}

double parseval_spectrum_energy(const Spectrum& s) {
    if (s.log_scaled) {
        throw std::invalid_argument(
            "parseval: spectrum is log-scaled; recompute without log scaling");
    }
    double e = 0.0;
    for (double m : s.magnitude) e += m * m;
    return e / static_cast<double>(s.height * s.width);
}

Branch branch_from_string(const std::string& str) {
    if (str == "local") return Branch::Local;
    if (str == "global") return Branch::Global;
    if (str == "fused-add-linear") return Branch::FusedAddLinear;
    if (str == "fused-interaction") return Branch::FusedInteraction;
    throw std::invalid_argument(
        "unknown branch '" + str +
        "' (expected local|global|fused-add-linear|fused-interaction)");
}

std::string to_string(Branch b) {
    switch (b) {
        case Branch::Local: return "local";
        case Branch::Global: return "global";
        case Branch::FusedAddLinear: return "fused-add-linear";
        case Branch::FusedInteraction: return "fused-interaction";
    }
    return "?";
}

std::vector<Spectrum> branch_spectra(const FatModel& model, const Tensor& img,
                                     i64 stage, i64 block, Branch branch,
                                     const std::vector<i64>& channels,
                                     bool log_scale) {
    FasaTaps taps = fat_block_taps(model, img, stage, block);
    const Tensor* map = nullptr;
    switch (branch) {
        case Branch::Local: map = &taps.local_silu; break;
        case Branch::Global: map = &taps.global_out; break;
        case Branch::FusedAddLinear: map = &taps.fused_add_linear; break;
        case Branch::FusedInteraction: map = &taps.fused_interaction; break;
    }
    if (map->empty()) {
        throw std::invalid_argument("branch " + to_string(branch) +
                                    " is not tapped for this fusion variant");
    }
    const i64 C = map->dim(1), H = map->dim(2), W = map->dim(3);
    std::vector<Spectrum> out;
    for (i64 c : channels) {
        if (c < 0 || c >= C) {
            throw std::invalid_argument("channel " + std::to_string(c) +
                                        " out of range [0, " +
                                        std::to_string(C) + ")");
        }
        Tensor plane({H, W}, Precision::f64);
        for (i64 y = 0; y < H; ++y) {
            for (i64 x = 0; x < W; ++x) plane[y * W + x] = map->at4(0, c, y, x);
        }
        Spectrum s = dft2_magnitude(plane, log_scale);
        s.channel = c;
        out.push_back(std::move(s));
    }
    return out;
}

void save_spectrum_csv(const Spectrum& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "u,v,magnitude\n";
    for (i64 u = 0; u < s.height; ++u) {
        for (i64 v = 0; v < s.width; ++v) {
            out << u << ',' << v << ',' << s.at(u, v) << '\n';
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

void save_spectrum_pgm(const Spectrum& s, const std::string& path) {
    double lo = s.magnitude.empty() ? 0.0 : s.magnitude[0];
    double hi = lo;
    for (double m : s.magnitude) {
        lo = std::min(lo, m);
        hi = std::max(hi, m);
    }
    const double range = hi - lo;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "P5\n" << s.width << ' ' << s.height << "\n255\n";
    for (double m : s.magnitude) {
        const double f = range > 0.0 ? (m - lo) / range : 0.0;
        out.put(static_cast<char>(
            static_cast<unsigned char>(std::lround(f * 255.0))));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::string spectrum_basename(i64 stage, i64 block, Branch branch, i64 channel) {
    return "stage" + std::to_string(stage) + "_block" + std::to_string(block) +
           "_" + to_string(branch) + "_ch" + std::to_string(channel);
}

}  // namespace fat
