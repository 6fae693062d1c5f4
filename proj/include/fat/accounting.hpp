#pragma once

#include <string>
#include <vector>

#include "fat/model.hpp"

namespace fat {

enum class LayerKind { Conv, DwConv, Linear, Norm, Attention, Elementwise };

std::string to_string(LayerKind k);

/// One parameterized (or FLOP-bearing) layer of a built model, described
/// symbolically. Names match the parameter-store prefixes of the builder.
struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::Conv;
    std::string group;  // stem | stage0..stage3 | head; for grouped deltas
    std::vector<i64> in_shape;   // [C,H,W]
    std::vector<i64> out_shape;  // [C,H,W]
    i64 kernel = 0, stride = 1, groups = 1;
    bool bias = false;
    i64 params = 0;  // learned scalar count
    i64 flops = 0;   // multiply-accumulates at the walked resolution, batch 1
};

struct Budget {
    i64 params = 0;
    i64 flops = 0;
    i64 resolution = 0;
};

/// Symbolic walk of the full model at a given square input resolution
/// (must be divisible by 32). FLOP convention: 1 FLOP = 1 multiply-accumulate;
/// convs H'*W'*Cout*(Cin/g)*k^2; linear T*Cin*Cout; attention Tq*Tkv*d per head
/// for QK^T and again for the value aggregation; norms, activations, pooling
/// and other elementwise work excluded.
std::vector<LayerSpec> enumerate_layers(const FatConfig& cfg, i64 resolution);

/// Stem only (valid for any resolution divisible by 4); used for the
/// conv-only resolution-scaling check.
std::vector<LayerSpec> enumerate_stem(const FatConfig& cfg, i64 resolution);

Budget total_budget(const std::vector<LayerSpec>& specs, i64 resolution);
i64 count_params(const FatConfig& cfg);
i64 count_flops(const FatConfig& cfg, i64 resolution);

struct GroupDelta {
    std::string group;
    i64 params_a = 0, params_b = 0;
    i64 flops_a = 0, flops_b = 0;
};

/// Per-group comparison of two walked models (groups as in LayerSpec::group).
std::vector<GroupDelta> diff_budgets(const std::vector<LayerSpec>& a,
                                     const std::vector<LayerSpec>& b);

/// Aligned text (or CSV with header "name,kind,group,params,flops") table,
/// with a trailing total row in text mode.
std::string budget_table(const std::vector<LayerSpec>& specs, bool csv);
std::string diff_table(const std::vector<GroupDelta>& deltas, bool csv);

}  // namespace fat
