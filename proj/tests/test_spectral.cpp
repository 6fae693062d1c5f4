#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fat/spectral.hpp"
#include "oracles.hpp"

using namespace fat;

TEST_CASE("dft2 matches the quadruple-loop oracle on random 8x8") {
    SplitMix64 rng(109);
    for (int it = 0; it < 20; ++it) {
        Tensor x = oracle::random_tensor({8, 8}, rng, Precision::f64);
        const Spectrum s = dft2_magnitude(x, false);
        const Tensor ref = oracle::dft2_mag(x);
        double worst = 0.0;
        for (i64 u = 0; u < 8; ++u)
            for (i64 v = 0; v < 8; ++v) {
                // undo the center shift: oracle bin (u,v) sits at
                // ((u+4)%8, (v+4)%8) in the shifted spectrum
                const double got = s.at((u + 4) % 8, (v + 4) % 8);
                worst = std::max(worst, std::fabs(got - ref[u * 8 + v]));
            }
        CHECK(worst <= 1e-9);
    }
}

TEST_CASE("constant image concentrates in the centered DC bin") {
    const double c = 2.75;
    Tensor x = Tensor::full({6, 8}, c, Precision::f64);
    const Spectrum s = dft2_magnitude(x, false);
    for (i64 u = 0; u < 6; ++u)
        for (i64 v = 0; v < 8; ++v) {
            if (u == 3 && v == 4) {
                CHECK(s.at(u, v) == doctest::Approx(c * 6 * 8).epsilon(1e-12));
            } else {
                CHECK(std::fabs(s.at(u, v)) <= 1e-9);
            }
        }
}

TEST_CASE("single cosine produces two symmetric peaks of H*W/2") {
    const i64 H = 8, W = 16, u0 = 3;
    Tensor x({H, W}, Precision::f64);
    const double pi = 3.14159265358979323846;
    for (i64 y = 0; y < H; ++y)
        for (i64 xx = 0; xx < W; ++xx)
            x[y * W + xx] = std::cos(2.0 * pi * u0 * xx / W);
    const Spectrum s = dft2_magnitude(x, false);
    const i64 cu = H / 2, cv = W / 2;
    CHECK(s.at(cu, cv + u0) == doctest::Approx(H * W / 2.0).epsilon(1e-9));
    CHECK(s.at(cu, cv - u0) == doctest::Approx(H * W / 2.0).epsilon(1e-9));
    double rest = 0.0;
    for (i64 u = 0; u < H; ++u)
        for (i64 v = 0; v < W; ++v) {
            if (u == cu && (v == cv + u0 || v == cv - u0)) continue;
            rest = std::max(rest, s.at(u, v));
        }
    CHECK(rest <= 1e-8);
}

TEST_CASE("Parseval identity") {
    SplitMix64 rng(113);
    for (int it = 0; it < 10; ++it) {
        Tensor x = oracle::random_tensor({7, 5}, rng, Precision::f64);
        const Spectrum s = dft2_magnitude(x, false);
        const double lhs = parseval_spectrum_energy(s);
        const double rhs = parseval_input_energy(x);
        CHECK(std::fabs(lhs - rhs) <= 1e-6 * std::max(1.0, std::fabs(rhs)));
    }
    // log-scaled spectra refuse the energy computation
    Tensor x = oracle::random_tensor({4, 4}, rng, Precision::f64);
    CHECK_THROWS(parseval_spectrum_energy(dft2_magnitude(x, true)));
}

TEST_CASE("real-input spectrum is point-symmetric about the center") {
    SplitMix64 rng(127);
    Tensor x = oracle::random_tensor({8, 8}, rng, Precision::f64);
    const Spectrum s = dft2_magnitude(x, false);
    // magnitude(u, v) == magnitude(-u, -v); with even extents the centered
    // grid pairs index i with (2*c - i) % n
    for (i64 u = 0; u < 8; ++u)
        for (i64 v = 0; v < 8; ++v) {
            const i64 ru = (8 - (u - 4) + 4) % 8;
            const i64 rv = (8 - (v - 4) + 4) % 8;
            CHECK(std::fabs(s.at(u, v) - s.at(ru % 8, rv % 8)) <= 1e-9);
        }
}

TEST_CASE("magnitude is homogeneous under input scaling") {
    SplitMix64 rng(131);
    Tensor x = oracle::random_tensor({6, 6}, rng, Precision::f64);
    Tensor x2 = x;
    const double alpha = -3.5;
    for (i64 i = 0; i < x2.numel(); ++i) x2[i] *= alpha;
    const Spectrum a = dft2_magnitude(x, false);
    const Spectrum b = dft2_magnitude(x2, false);
    for (i64 i = 0; i < 36; ++i) {
        CHECK(b.magnitude[static_cast<std::size_t>(i)] ==
              doctest::Approx(std::fabs(alpha) *
                              a.magnitude[static_cast<std::size_t>(i)])
                  .epsilon(1e-9));
    }
}

TEST_CASE("branch spectra from a small random model") {
    FatModel model = build_model(build_preset("tiny"));
    init_model(model, 17);
    SplitMix64 rng(137);
    Tensor img = oracle::random_tensor({1, 3, 32, 32}, rng, Precision::f32);
    const auto locals =
        branch_spectra(model, img, 1, 0, Branch::Local, {0, 1, 2}, false);
    REQUIRE(locals.size() == 3);
    for (const auto& s : locals) {
        CHECK(s.height == 4);  // 32/8 at stage 1
        CHECK(s.width == 4);
    }
    const auto globals =
        branch_spectra(model, img, 1, 0, Branch::Global, {0}, false);
    double l2 = 0.0;
    for (i64 i = 0; i < 16; ++i) {
        const double d = locals[0].magnitude[static_cast<std::size_t>(i)] -
                         globals[0].magnitude[static_cast<std::size_t>(i)];
        l2 += d * d;
    }
    CHECK(l2 > 0.0);
    const auto fa = branch_spectra(model, img, 1, 0, Branch::FusedAddLinear,
                                   {0}, false);
    const auto fi = branch_spectra(model, img, 1, 0, Branch::FusedInteraction,
                                   {0}, false);
    CHECK(oracle::max_abs_diff(
              Tensor::from_values({16}, std::vector<double>(
                                            fa[0].magnitude.begin(),
                                            fa[0].magnitude.end()),
                                  Precision::f64),
              Tensor::from_values({16}, std::vector<double>(
                                            fi[0].magnitude.begin(),
                                            fi[0].magnitude.end()),
                                  Precision::f64)) > 0.0);
    CHECK_THROWS(branch_spectra(model, img, 1, 0, Branch::Local, {999}, false));
}

TEST_CASE("file exports: CSV header, P5 payload, naming") {
    SplitMix64 rng(139);
    Tensor x = oracle::random_tensor({4, 4}, rng, Precision::f64);
    Spectrum s = dft2_magnitude(x, true);
    s.channel = 3;
    save_spectrum_csv(s, "spec_test.csv");
    {
        std::ifstream f("spec_test.csv");
        std::string header;
        std::getline(f, header);
        CHECK(header == "u,v,magnitude");
        int rows = 0;
        std::string line;
        while (std::getline(f, line)) ++rows;
        CHECK(rows == 16);
    }
    save_spectrum_pgm(s, "spec_test.pgm");
    {
        std::ifstream f("spec_test.pgm", std::ios::binary);
        std::string magic;
        f >> magic;
        CHECK(magic == "P5");
        i64 w, h, maxv;
        f >> w >> h >> maxv;
        CHECK(w == 4);
        CHECK(h == 4);
        CHECK(maxv == 255);
        f.get();  // single whitespace after header
        std::vector<char> payload(16);
        f.read(payload.data(), 16);
        CHECK(f.gcount() == 16);
        f.get();
        CHECK(f.eof());
    }
    CHECK(spectrum_basename(2, 1, Branch::FusedInteraction, 7) ==
          "stage2_block1_fused-interaction_ch7");
    std::remove("spec_test.csv");
    std::remove("spec_test.pgm");
}
