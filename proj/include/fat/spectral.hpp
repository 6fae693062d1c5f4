#pragma once

#include <string>
#include <vector>

#include "fat/model.hpp"

namespace fat {

/// Centered 2D DFT magnitude of one feature-map channel.
struct Spectrum {
    i64 channel = 0;
    i64 height = 0, width = 0;
    std::vector<double> magnitude;  // row-major H x W
    bool center_shifted = true;
    bool log_scaled = false;

    double at(i64 u, i64 v) const {
        return magnitude[static_cast<std::size_t>(u * width + v)];
    }
};

/// Direct O(N^4) 2D DFT in 64-bit; magnitude, quadrant-swap center shift,
/// optional log(1+m) scaling. x is a [H,W] tensor.
Spectrum dft2_magnitude(const Tensor& x, bool log_scale = false);

/// Sum of squared input samples, for Parseval checks:
/// sum |X|^2 / (H*W) == sum |x|^2 (pre-log magnitudes).
double parseval_input_energy(const Tensor& x);
double parseval_spectrum_energy(const Spectrum& s);

enum class Branch { Local, Global, FusedAddLinear, FusedInteraction };
Branch branch_from_string(const std::string& s);
std::string to_string(Branch b);

/// Spectra of the selected FASA branch at one block, one per requested
/// channel. The two fusion-variant taps are computed side by side from
/// identical inputs regardless of the model's configured fusion.
std::vector<Spectrum> branch_spectra(const FatModel& model, const Tensor& img,
                                     i64 stage, i64 block, Branch branch,
                                     const std::vector<i64>& channels,
                                     bool log_scale = true);

/// CSV with header "u,v,magnitude".
void save_spectrum_csv(const Spectrum& s, const std::string& path);
/// Binary P5 PGM, min-max normalized to 0..255.
void save_spectrum_pgm(const Spectrum& s, const std::string& path);
/// stage{S}_block{B}_{branch}_ch{C}  (extension appended by the writers)
std::string spectrum_basename(i64 stage, i64 block, Branch branch, i64 channel);

}  // namespace fat
