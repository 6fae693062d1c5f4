#include "fat/fasa.hpp"

#include <stdexcept>

namespace fat {

Fusion fusion_from_string(const std::string& s) {
    if (s == "interaction") return Fusion::Interaction;
    if (s == "add-linear") return Fusion::AddLinear;
    if (s == "cat-linear") return Fusion::CatLinear;
    if (s == "mul-linear") return Fusion::MulLinear;
    throw std::invalid_argument(
        "unknown fusion variant '" + s +
        "' (expected interaction|add-linear|cat-linear|mul-linear)");
}

Downsample downsample_from_string(const std::string& s) {
    if (s == "refined") return Downsample::Refined;
    if (s == "pool-down") return Downsample::PoolDown;
    if (s == "conv-no-overlap") return Downsample::ConvNoOverlap;
    if (s == "conv-overlap") return Downsample::ConvOverlap;
    throw std::invalid_argument(
        "unknown downsample variant '" + s +
        "' (expected refined|pool-down|conv-no-overlap|conv-overlap)");
}

std::string to_string(Fusion f) {
    switch (f) {
        case Fusion::Interaction: return "interaction";
        case Fusion::AddLinear: return "add-linear";
        case Fusion::CatLinear: return "cat-linear";
        case Fusion::MulLinear: return "mul-linear";
    }
    return "?";
}

std::string to_string(Downsample d) {
    switch (d) {
        case Downsample::Refined: return "refined";
        case Downsample::PoolDown: return "pool-down";
        case Downsample::ConvNoOverlap: return "conv-no-overlap";
        case Downsample::ConvOverlap: return "conv-overlap";
    }
    return "?";
}

FasaBlock build_fasa(ParamRegistry& reg, const std::string& prefix,
                     const FasaConfig& cfg, Precision prec) {
    const i64 C = cfg.channels;
    if (C % cfg.heads != 0) {
        throw std::invalid_argument("fasa: channels " + std::to_string(C) +
                                    " not divisible by heads " +
                                    std::to_string(cfg.heads));
    }
    if (cfg.local_kernel % 2 == 0 || cfg.pool_units < 0) {
        throw std::invalid_argument("fasa: local kernel must be odd, pool units >= 0");
    }
    FasaBlock blk;
    blk.cfg = cfg;
    blk.wq = make_conv(reg, prefix + ".wq", C, C, 1, 1, 0, 1, true, prec);
    const i64 r = i64{1} << cfg.pool_units;
    switch (cfg.downsample) {
        case Downsample::Refined:
            for (i64 u = 0; u < cfg.pool_units; ++u) {
                const std::string un = prefix + ".pool.unit" + std::to_string(u);
                PoolBaseUnit bu;
                bu.dw = make_conv(reg, un + ".dw", C, C, 5, 2, 2, C, false, prec);
                bu.bn = make_norm(reg, un + ".bn", NormKind::Batch, C, prec);
                bu.pw = make_conv(reg, un + ".pw", C, C, 1, 1, 0, 1, true, prec);
                blk.units.push_back(std::move(bu));
            }
            blk.final_dw = make_conv(reg, prefix + ".pool.final_dw", C, C, 3, 1, 1,
                                     C, false, prec);
            blk.final_bn =
                make_norm(reg, prefix + ".pool.final_bn", NormKind::Batch, C, prec);
            break;
        case Downsample::PoolDown:
            break;  // parameter-free
        case Downsample::ConvNoOverlap:
            blk.has_pool_conv = true;
            blk.pool_conv = make_conv(reg, prefix + ".pool.conv", C, C,
                                      r == 1 ? 1 : r, r == 1 ? 1 : r, 0, 1, true,
                                      prec);
            break;
        case Downsample::ConvOverlap:
            blk.has_pool_conv = true;
            blk.pool_conv =
                r == 1 ? make_conv(reg, prefix + ".pool.conv", C, C, 1, 1, 0, 1,
                                   true, prec)
                       : make_conv(reg, prefix + ".pool.conv", C, C, r + 1, r, 1,
                                   1, true, prec);
            break;
    }
    blk.wkv = make_conv(reg, prefix + ".wkv", C, 2 * C, 1, 1, 0, 1, true, prec);
    blk.local_dw = make_conv(reg, prefix + ".local", C, C, cfg.local_kernel, 1,
                             (cfg.local_kernel - 1) / 2, C, true, prec);
    const i64 proj_in = cfg.fusion == Fusion::CatLinear ? 2 * C : C;
    blk.proj = make_conv(reg, prefix + ".proj", proj_in, C, 1, 1, 0, 1, true, prec);
    return blk;
}

Var fasa_pool(const FasaBlock& blk, const Var& x) {
    const i64 H = x->value.dim(2), W = x->value.dim(3);
    const i64 r = i64{1} << blk.cfg.pool_units;
    if (H % r != 0 || W % r != 0) {
        throw std::invalid_argument("fasa pool: extent " + x->value.shape_str() +
                                    " not divisible by " + std::to_string(r));
    }
    switch (blk.cfg.downsample) {
        case Downsample::Refined: {
            Var h = x;
            for (const auto& u : blk.units) h = apply_layer(u.pw, apply_layer(u.bn, apply_layer(u.dw, h)));
            return apply_layer(blk.final_bn, apply_layer(blk.final_dw, h));
        }
        case Downsample::PoolDown:
            return r == 1 ? x : avg_pool2d(x, r, r);
        case Downsample::ConvNoOverlap:
        case Downsample::ConvOverlap:
            return apply_layer(blk.pool_conv, x);
    }
    throw std::logic_error("fasa pool: unreachable");
}

std::pair<Var, Var> fasa_global(const FasaBlock& blk, const Var& x) {
    const i64 C = blk.cfg.channels;
    Var q = apply_layer(blk.wq, x);
    Var pooled = fasa_pool(blk, x);
    Var kv = apply_layer(blk.wkv, pooled);
    Var k = slice_channels(kv, 0, C);
    Var v = slice_channels(kv, C, C);
    Var xg = mhsa_pooled(q, k, v, blk.cfg.heads);
    return {q, xg};
}

Var fasa_local(const FasaBlock& blk, const Var& q) {
    return apply_layer(blk.local_dw, q);
}

Var fasa_fuse(const FasaBlock& blk, const Var& q_prime, const Var& x_global) {
    if (!same_shape(q_prime->value, x_global->value)) {
        throw std::invalid_argument("fasa fuse: shape mismatch " +
                                    q_prime->value.shape_str() + " vs " +
                                    x_global->value.shape_str());
    }
    switch (blk.cfg.fusion) {
        case Fusion::Interaction: {
            Var merged = mul(silu(q_prime), silu(x_global));
            if (blk.cfg.extra_sigmoid) {
                merged = mul(merged, sigmoid_op(silu(q_prime)));
            }
            return apply_layer(blk.proj, merged);
        }
        case Fusion::AddLinear:
            return apply_layer(blk.proj, add(silu(q_prime), x_global));
        case Fusion::CatLinear:
            return apply_layer(blk.proj, concat_channels(silu(q_prime), x_global));
        case Fusion::MulLinear:
            return apply_layer(blk.proj, mul(silu(q_prime), x_global));
    }
    throw std::logic_error("fasa fuse: unreachable");
}

Var fasa_forward(const FasaBlock& blk, const Var& x, FasaTaps* taps) {
    auto [q, xg] = fasa_global(blk, x);
    Var qp = fasa_local(blk, q);
    if (taps) {
        taps->local_silu = silu(qp)->value;
        taps->global_out = xg->value;
        if (blk.proj.cin == blk.cfg.channels) {
            taps->fused_interaction =
                apply_layer(blk.proj, mul(silu(qp), silu(xg)))->value;
            taps->fused_add_linear = apply_layer(blk.proj, add(silu(qp), xg))->value;
        }
    }
    return fasa_fuse(blk, qp, xg);
}

}  // namespace fat
