#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fat/layers.hpp"

namespace fat {

/// How the local and global branches are merged.
enum class Fusion { Interaction, AddLinear, CatLinear, MulLinear };
/// How K/V are spatially reduced before attention.
enum class Downsample { Refined, PoolDown, ConvNoOverlap, ConvOverlap };

Fusion fusion_from_string(const std::string& s);
Downsample downsample_from_string(const std::string& s);
std::string to_string(Fusion f);
std::string to_string(Downsample d);

struct FasaConfig {
    i64 channels = 0;
    i64 heads = 1;
    i64 local_kernel = 3;  // odd
    i64 pool_units = 0;    // count of stride-2 base units; reduction 2^n
    Fusion fusion = Fusion::Interaction;
    Downsample downsample = Downsample::Refined;
    bool extra_sigmoid = false;
};

/// One stride-2 stage of the fine-grained downsampler:
/// Conv1x1(BN(DWConv5x5 stride 2)).
struct PoolBaseUnit {
    ConvLayer dw;
    NormLayer bn;
    ConvLayer pw;
};

struct FasaBlock {
    FasaConfig cfg;
    ConvLayer wq;   // 1x1, C -> C, queries at full resolution
    ConvLayer wkv;  // 1x1, C -> 2C, keys/values at pooled resolution
    // refined downsample
    std::vector<PoolBaseUnit> units;
    ConvLayer final_dw;
    NormLayer final_bn;
    // conv downsample variants
    bool has_pool_conv = false;
    ConvLayer pool_conv;
    ConvLayer local_dw;  // self-modulated local aggregation kernel
    ConvLayer proj;      // W2; input width doubles for cat-linear
};

FasaBlock build_fasa(ParamRegistry& reg, const std::string& prefix,
                     const FasaConfig& cfg, Precision prec);

/// Fine-grained (or variant) downsample of the input map by 2^pool_units.
Var fasa_pool(const FasaBlock& blk, const Var& x);
/// Returns {Q, X'_global}; Q is reused by the local branch.
std::pair<Var, Var> fasa_global(const FasaBlock& blk, const Var& x);
/// Q' = DWConv(Q). The SiLU modulation is applied inside the fusion.
Var fasa_local(const FasaBlock& blk, const Var& q);
Var fasa_fuse(const FasaBlock& blk, const Var& q_prime, const Var& x_global);

/// Intermediate captures for spectral analysis. The two fusion variants are
/// computed side by side from identical inputs.
struct FasaTaps {
    Tensor local_silu;
    Tensor global_out;
    Tensor fused_interaction;
    Tensor fused_add_linear;
};

Var fasa_forward(const FasaBlock& blk, const Var& x, FasaTaps* taps = nullptr);

}  // namespace fat
