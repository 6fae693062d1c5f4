#include "fat/accounting.hpp"

#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fat {

std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::DwConv: return "dwconv";
        case LayerKind::Linear: return "linear";
        case LayerKind::Norm: return "norm";
        case LayerKind::Attention: return "attention";
        case LayerKind::Elementwise: return "elementwise";
    }
    return "?";
}

namespace {

struct Walker {
    std::vector<LayerSpec> specs;
    std::string group;

    // Returns the output extent. FLOPs use the MAC convention.
    i64 conv(const std::string& name, i64 cin, i64 cout, i64 k, i64 stride,
             i64 pad, i64 groups, bool bias, i64 h) {
        LayerSpec s;
        s.name = name;
        s.kind = groups == cin && groups == cout && cin > 1 ? LayerKind::DwConv
                                                           : LayerKind::Conv;
        s.group = group;
        const i64 ho = conv_out_extent(h, k, stride, pad);
        s.in_shape = {cin, h, h};
        s.out_shape = {cout, ho, ho};
        s.kernel = k;
        s.stride = stride;
        s.groups = groups;
        s.bias = bias;
        s.params = cout * (cin / groups) * k * k + (bias ? cout : 0);
        s.flops = ho * ho * cout * (cin / groups) * k * k;
        specs.push_back(std::move(s));
        return ho;
    }

    void norm(const std::string& name, i64 c, i64 h) {
        LayerSpec s;
        s.name = name;
        s.kind = LayerKind::Norm;
        s.group = group;
        s.in_shape = s.out_shape = {c, h, h};
        s.params = 2 * c;  // gamma + beta; BN running stats are not learned
        s.flops = 0;
        specs.push_back(std::move(s));
    }

    void attention(const std::string& name, i64 c, i64 hq, i64 hkv) {
        LayerSpec s;
        s.name = name;
        s.kind = LayerKind::Attention;
        s.group = group;
        s.in_shape = {c, hq, hq};
        s.out_shape = {c, hq, hq};
        s.params = 0;  // projections are emitted separately
        // Tq*Tkv*d per head for QK^T, again for .V; summed over heads = 2*Tq*Tkv*C.
        s.flops = 2 * (hq * hq) * (hkv * hkv) * c;
        specs.push_back(std::move(s));
    }

    void linear_head(const std::string& name, i64 cin, i64 cout) {
        LayerSpec s;
        s.name = name;
        s.kind = LayerKind::Linear;
        s.group = group;
        s.in_shape = {cin};
        s.out_shape = {cout};
        s.bias = true;
        s.params = cin * cout + cout;
        s.flops = cin * cout;
        specs.push_back(std::move(s));
    }
};

i64 walk_stem(Walker& w, const FatConfig& cfg, i64 h) {
    w.group = "stem";
    const i64 c0 = cfg.stem_mid, c1 = cfg.stem_out;
    h = w.conv("stem.conv0", 3, c0, 3, 2, 1, 1, false, h);
    w.norm("stem.bn0", c0, h);
    h = w.conv("stem.conv1", c0, c1, 3, 2, 1, 1, false, h);
    w.norm("stem.bn1", c1, h);
    h = w.conv("stem.conv2", c1, c1, 3, 1, 1, 1, false, h);
    w.norm("stem.bn2", c1, h);
    h = w.conv("stem.conv3", c1, c1, 3, 1, 1, 1, false, h);
    w.norm("stem.bn3", c1, h);
    h = w.conv("stem.proj", c1, c1, 1, 1, 0, 1, true, h);
    w.norm("stem.ln", c1, h);
    return h;
}

void walk_fasa(Walker& w, const std::string& pfx, const FatConfig& cfg,
               const StageConfig& st, i64 h) {
    const i64 C = st.channels;
    w.conv(pfx + ".wq", C, C, 1, 1, 0, 1, true, h);
    i64 hp = h;
    const i64 r = i64{1} << st.pool_units;
    switch (cfg.downsample) {
        case Downsample::Refined:
            for (i64 u = 0; u < st.pool_units; ++u) {
                const std::string un = pfx + ".pool.unit" + std::to_string(u);
                hp = w.conv(un + ".dw", C, C, 5, 2, 2, C, false, hp);
                w.norm(un + ".bn", C, hp);
                w.conv(un + ".pw", C, C, 1, 1, 0, 1, true, hp);
            }
            w.conv(pfx + ".pool.final_dw", C, C, 3, 1, 1, C, false, hp);
            w.norm(pfx + ".pool.final_bn", C, hp);
            break;
        case Downsample::PoolDown:
            hp = h / r;  // parameter-free average pool
            break;
        case Downsample::ConvNoOverlap:
            hp = w.conv(pfx + ".pool.conv", C, C, r == 1 ? 1 : r,
                        r == 1 ? 1 : r, 0, 1, true, hp);
            break;
        case Downsample::ConvOverlap:
            hp = r == 1 ? w.conv(pfx + ".pool.conv", C, C, 1, 1, 0, 1, true, hp)
                        : w.conv(pfx + ".pool.conv", C, C, r + 1, r, 1, 1, true,
                                 hp);
            break;
    }
    w.conv(pfx + ".wkv", C, 2 * C, 1, 1, 0, 1, true, hp);
    w.attention(pfx + ".attn", C, h, hp);
    w.conv(pfx + ".local", C, C, st.fasa_kernel, 1, (st.fasa_kernel - 1) / 2, C,
           true, h);
    const i64 proj_in = cfg.fusion == Fusion::CatLinear ? 2 * C : C;
    w.conv(pfx + ".proj", proj_in, C, 1, 1, 0, 1, true, h);
}

std::vector<LayerSpec> walk(const FatConfig& cfg, i64 resolution,
                            bool stem_only) {
    if (resolution < 1 || resolution % (stem_only ? 4 : 32) != 0) {
        throw std::invalid_argument(
            "resolution " + std::to_string(resolution) +
            (stem_only ? " not divisible by 4" : " not divisible by 32"));
    }
    Walker w;
    i64 h = walk_stem(w, cfg, resolution);
    if (stem_only) return std::move(w.specs);

    for (int s = 0; s < 4; ++s) {
        const StageConfig& st = cfg.stages[s];
        w.group = "stage" + std::to_string(s);
        const i64 C = st.channels;
        for (i64 b = 0; b < st.blocks; ++b) {
            const std::string pfx =
                "stages." + std::to_string(s) + ".blocks." + std::to_string(b);
            const bool boundary = (b == st.blocks - 1 && s < 3);
            const i64 cout = boundary ? cfg.stages[s + 1].channels : C;
            if (cfg.cpe) {
                w.conv(pfx + ".cpe", C, C, st.cpe_kernel, 1,
                       (st.cpe_kernel - 1) / 2, C, true, h);
            }
            w.norm(pfx + ".ln1", C, h);
            walk_fasa(w, pfx + ".fasa", cfg, st, h);
            w.norm(pfx + ".ln2", C, h);
            const i64 hidden = cfg.ffn_ratio * C;
            w.conv(pfx + ".ffn.fc1", C, hidden, 1, 1, 0, 1, true, h);
            const i64 hn =
                w.conv(pfx + ".ffn.dw", hidden, hidden, cfg.ffn_kernel,
                       boundary ? 2 : 1, (cfg.ffn_kernel - 1) / 2, hidden, true,
                       h);
            w.conv(pfx + ".ffn.fc2", hidden, cout, 1, 1, 0, 1, true, hn);
            if (boundary) {
                w.conv(pfx + ".short.dw", C, C, 3, 2, 1, C, true, h);
                w.conv(pfx + ".short.pw", C, cout, 1, 1, 0, 1, true, hn);
            }
            h = hn;
        }
    }
    w.group = "head";
    w.norm("final_ln", cfg.stages[3].channels, 1);
    w.linear_head("head", cfg.stages[3].channels, cfg.num_classes);
    return std::move(w.specs);
}

}  // namespace

std::vector<LayerSpec> enumerate_layers(const FatConfig& cfg, i64 resolution) {
    return walk(cfg, resolution, false);
}

std::vector<LayerSpec> enumerate_stem(const FatConfig& cfg, i64 resolution) {
    return walk(cfg, resolution, true);
}

Budget total_budget(const std::vector<LayerSpec>& specs, i64 resolution) {
    Budget b;
    b.resolution = resolution;
    for (const auto& s : specs) {
        b.params += s.params;
        b.flops += s.flops;
    }
    return b;
}

i64 count_params(const FatConfig& cfg) {
    return total_budget(enumerate_layers(cfg, 224), 224).params;
}

i64 count_flops(const FatConfig& cfg, i64 resolution) {
    return total_budget(enumerate_layers(cfg, resolution), resolution).flops;
}

std::vector<GroupDelta> diff_budgets(const std::vector<LayerSpec>& a,
                                     const std::vector<LayerSpec>& b) {
    std::map<std::string, GroupDelta> by_group;
    std::vector<std::string> order;
    auto slot = [&](const std::string& g) -> GroupDelta& {
        auto it = by_group.find(g);
        if (it == by_group.end()) {
            order.push_back(g);
            it = by_group.emplace(g, GroupDelta{g}).first;
        }
        return it->second;
    };
    for (const auto& s : a) {
        GroupDelta& d = slot(s.group);
        d.params_a += s.params;
        d.flops_a += s.flops;
    }
    for (const auto& s : b) {
        GroupDelta& d = slot(s.group);
        d.params_b += s.params;
        d.flops_b += s.flops;
    }
    std::vector<GroupDelta> out;
    for (const auto& g : order) out.push_back(by_group.at(g));
    return out;
}

std::string budget_table(const std::vector<LayerSpec>& specs, bool csv) {
    std::ostringstream os;
    if (csv) {
        os << "name,kind,group,params,flops\n";
        for (const auto& s : specs) {
            os << s.name << ',' << to_string(s.kind) << ',' << s.group << ','
               << s.params << ',' << s.flops << '\n';
        }
        return os.str();
    }
    std::size_t name_w = 5;
    for (const auto& s : specs) name_w = std::max(name_w, s.name.size());
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "layer"
       << std::setw(12) << "kind" << std::right << std::setw(12) << "params"
       << std::setw(16) << "flops" << '\n';
    i64 tp = 0, tf = 0;
    for (const auto& s : specs) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << s.name
           << std::setw(12) << to_string(s.kind) << std::right << std::setw(12)
           << s.params << std::setw(16) << s.flops << '\n';
        tp += s.params;
        tf += s.flops;
    }
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "total"
       << std::setw(12) << "" << std::right << std::setw(12) << tp
       << std::setw(16) << tf << '\n';
    os << "total params " << std::fixed << std::setprecision(3)
       << static_cast<double>(tp) / 1e6 << "M, flops "
       << static_cast<double>(tf) / 1e9 << "G (1 FLOP = 1 MAC)\n";
    return os.str();
}

std::string diff_table(const std::vector<GroupDelta>& deltas, bool csv) {
    std::ostringstream os;
    if (csv) {
        os << "group,params_a,params_b,dparams,flops_a,flops_b,dflops\n";
        for (const auto& d : deltas) {
            os << d.group << ',' << d.params_a << ',' << d.params_b << ','
               << (d.params_b - d.params_a) << ',' << d.flops_a << ','
               << d.flops_b << ',' << (d.flops_b - d.flops_a) << '\n';
        }
        return os.str();
    }
    os << std::left << std::setw(10) << "group" << std::right << std::setw(12)
       << "params_a" << std::setw(12) << "params_b" << std::setw(12)
       << "dparams" << std::setw(16) << "flops_a" << std::setw(16) << "flops_b"
       << std::setw(14) << "dflops" << '\n';
    GroupDelta tot{"total"};
    for (const auto& d : deltas) {
        os << std::left << std::setw(10) << d.group << std::right
           << std::setw(12) << d.params_a << std::setw(12) << d.params_b
           << std::setw(12) << (d.params_b - d.params_a) << std::setw(16)
           << d.flops_a << std::setw(16) << d.flops_b << std::setw(14)
           << (d.flops_b - d.flops_a) << '\n';
        tot.params_a += d.params_a;
        tot.params_b += d.params_b;
        tot.flops_a += d.flops_a;
        tot.flops_b += d.flops_b;
    }
    os << std::left << std::setw(10) << tot.group << std::right << std::setw(12)
       << tot.params_a << std::setw(12) << tot.params_b << std::setw(12)
       << (tot.params_b - tot.params_a) << std::setw(16) << tot.flops_a
       << std::setw(16) << tot.flops_b << std::setw(14)
       << (tot.flops_b - tot.flops_a) << '\n';
    return os.str();
}

}  // namespace fat
