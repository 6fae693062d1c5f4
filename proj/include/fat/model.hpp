#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fat/fasa.hpp"
#include "fat/weight_store.hpp"

namespace fat {

struct StageConfig {
    i64 blocks = 1;
    i64 channels = 8;
    i64 heads = 1;
    i64 fasa_kernel = 3;
    i64 cpe_kernel = 3;
    i64 pool_units = 0;
};

struct FatConfig {
    i64 stem_mid = 16;
    i64 stem_out = 32;
    std::array<StageConfig, 4> stages{};
    i64 ffn_kernel = 5;
    i64 ffn_ratio = 4;
    i64 num_classes = 1000;
    bool cpe = true;
    Fusion fusion = Fusion::Interaction;
    Downsample downsample = Downsample::Refined;
    bool extra_sigmoid = false;
};

/// Named presets: B0, B1, B2, B3, B3-ST, plus "tiny" (one block per stage,
/// small enough for finite-difference checks).
FatConfig build_preset(const std::string& name);
std::vector<std::string> preset_names();

/// Flat key=value config text; `preset=B0` loads a preset first, remaining
/// keys override individual fields.
FatConfig parse_config_text(const std::string& text);
FatConfig load_config_file(const std::string& path);

struct FatBlock {
    bool boundary = false;
    i64 in_ch = 0, out_ch = 0;
    bool has_cpe = true;
    ConvLayer cpe;
    NormLayer ln1, ln2;
    FasaBlock fasa;
    ConvLayer ffn_fc1, ffn_dw, ffn_fc2;
    ConvLayer short_dw, short_pw;  // boundary blocks only
};

struct Stem {
    std::array<ConvLayer, 4> convs;
    std::array<NormLayer, 4> bns;
    ConvLayer proj;
    NormLayer ln;
};

struct FatModel {
    FatConfig cfg;
    Precision prec = Precision::f32;
    Stem stem;
    std::vector<std::vector<FatBlock>> stages;
    NormLayer final_ln;
    LinearLayer head;
    ParamRegistry params;
};

FatModel build_model(const FatConfig& cfg, Precision prec = Precision::f32);
void init_model(FatModel& model, std::uint64_t seed);
WeightStore to_store(const FatModel& model);
void load_from_store(FatModel& model, const WeightStore& store);
/// Deterministic random weights for a config (same seed, bit-identical store).
WeightStore init_random(const FatConfig& cfg, std::uint64_t seed);

Var stem_forward(const FatModel& model, const Var& img);
Var fat_block_forward(const FatBlock& blk, const Var& x, FasaTaps* taps = nullptr);

struct StageTaps {
    std::vector<Tensor> stage_outputs;
};

Var fat_forward(const FatModel& model, const Var& img, StageTaps* taps = nullptr);
Tensor fat_forward_infer(const FatModel& model, const Tensor& img);

/// FASA branch captures at one block, for spectral analysis.
FasaTaps fat_block_taps(const FatModel& model, const Tensor& img, i64 stage,
                        i64 block);

}  // namespace fat
