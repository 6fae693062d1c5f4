#include "fat/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fat/rng.hpp"

namespace fat {

namespace {

FatConfig make_config(i64 stem_mid, i64 stem_out, std::array<i64, 4> blocks,
                      std::array<i64, 4> channels, std::array<i64, 4> heads,
                      i64 num_classes) {
    FatConfig cfg;
    cfg.stem_mid = stem_mid;
    cfg.stem_out = stem_out;
    cfg.num_classes = num_classes;
    const std::array<i64, 4> kernels{3, 5, 7, 9};
    const std::array<i64, 4> pool_units{3, 2, 1, 0};
    for (int s = 0; s < 4; ++s) {
        cfg.stages[s].blocks = blocks[s];
        cfg.stages[s].channels = channels[s];
        cfg.stages[s].heads = heads[s];
        cfg.stages[s].fasa_kernel = kernels[s];
        cfg.stages[s].cpe_kernel = kernels[s];
        cfg.stages[s].pool_units = pool_units[s];
    }
    return cfg;
}

}  // namespace

FatConfig build_preset(const std::string& name) {
    if (name == "B0")
        return make_config(16, 32, {2, 2, 6, 2}, {32, 80, 160, 256},
                           {2, 5, 10, 16}, 1000);
    if (name == "B1")
        return make_config(24, 48, {2, 2, 6, 2}, {48, 96, 192, 384},
                           {3, 6, 12, 24}, 1000);
    if (name == "B2")
        return make_config(32, 64, {2, 2, 6, 2}, {64, 128, 256, 512},
                           {2, 4, 8, 16}, 1000);
    if (name == "B3")
        return make_config(32, 64, {4, 4, 16, 4}, {64, 128, 256, 512},
                           {2, 4, 8, 16}, 1000);
    if (name == "B3-ST")
        return make_config(48, 96, {2, 2, 6, 2}, {96, 192, 384, 768},
                           {3, 6, 12, 24}, 1000);
    if (name == "tiny") {
        // One block per stage, small enough for exhaustive finite differences.
        FatConfig cfg = make_config(4, 8, {1, 1, 1, 1}, {8, 12, 16, 20},
                                    {2, 3, 4, 5}, 10);
        return cfg;
    }
    throw std::invalid_argument("unknown preset '" + name +
                                "' (expected B0|B1|B2|B3|B3-ST|tiny)");
}

std::vector<std::string> preset_names() {
    return {"B0", "B1", "B2", "B3", "B3-ST", "tiny"};
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

i64 parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    i64 r = 0;
    try {
        r = std::stoll(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty()) {
        throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    }
    return r;
}

}  // namespace

FatConfig parse_config_text(const std::string& text) {
    FatConfig cfg = build_preset("tiny");
    std::vector<std::pair<std::string, std::string>> kvs;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key=value, got '" + line + "'");
        }
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t");
            return s.substr(a, b - a + 1);
        };
        kvs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const auto& [k, v] : kvs) {
        if (k == "preset") cfg = build_preset(v);
    }
    for (const auto& [k, v] : kvs) {
        if (k == "preset") continue;
        if (k == "stem_mid") cfg.stem_mid = parse_int(k, v);
        else if (k == "stem_out") cfg.stem_out = parse_int(k, v);
        else if (k == "ffn_kernel") cfg.ffn_kernel = parse_int(k, v);
        else if (k == "ffn_ratio") cfg.ffn_ratio = parse_int(k, v);
        else if (k == "num_classes") cfg.num_classes = parse_int(k, v);
        else if (k == "cpe") cfg.cpe = parse_bool(k, v);
        else if (k == "fusion") cfg.fusion = fusion_from_string(v);
        else if (k == "downsample") cfg.downsample = downsample_from_string(v);
        else if (k == "extra_sigmoid") cfg.extra_sigmoid = parse_bool(k, v);
        else if (k.rfind("stage", 0) == 0 && k.size() > 6 && k[6] == '.') {
            const char sc = k[5];
            if (sc < '0' || sc > '3') {
                throw std::invalid_argument("config: bad stage index in '" + k + "'");
            }
            StageConfig& st = cfg.stages[static_cast<std::size_t>(sc - '0')];
            const std::string field = k.substr(7);
            if (field == "blocks") st.blocks = parse_int(k, v);
            else if (field == "channels") st.channels = parse_int(k, v);
            else if (field == "heads") st.heads = parse_int(k, v);
            else if (field == "fasa_kernel") st.fasa_kernel = parse_int(k, v);
            else if (field == "cpe_kernel") st.cpe_kernel = parse_int(k, v);
            else if (field == "pool_units") st.pool_units = parse_int(k, v);
            else throw std::invalid_argument("config: unknown key '" + k + "'");
        } else {
            throw std::invalid_argument("config: unknown key '" + k + "'");
        }
    }
    return cfg;
}

FatConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

namespace {

void validate_config(const FatConfig& cfg) {
    if (cfg.stem_mid < 1 || cfg.stem_out < 1 || cfg.num_classes < 1 ||
        cfg.ffn_ratio < 1 || cfg.ffn_kernel < 1 || cfg.ffn_kernel % 2 == 0) {
        throw std::invalid_argument("config: stem/ffn/class fields out of range");
    }
    if (cfg.stem_out != cfg.stages[0].channels) {
        throw std::invalid_argument(
            "config: stem_out (" + std::to_string(cfg.stem_out) +
            ") must equal stage 0 channels (" +
            std::to_string(cfg.stages[0].channels) + ")");
    }
    for (int s = 0; s < 4; ++s) {
        const StageConfig& st = cfg.stages[s];
        if (st.blocks < 1 || st.channels < 1 || st.heads < 1 ||
            st.pool_units < 0) {
            throw std::invalid_argument("config: stage " + std::to_string(s) +
                                        " fields out of range");
        }
        if (st.channels % st.heads != 0) {
            throw std::invalid_argument(
                "config: stage " + std::to_string(s) + " channels " +
                std::to_string(st.channels) + " not divisible by heads " +
                std::to_string(st.heads));
        }
        if (st.fasa_kernel % 2 == 0 || st.cpe_kernel % 2 == 0) {
            throw std::invalid_argument("config: stage " + std::to_string(s) +
                                        " kernels must be odd");
        }
    }
}

}  // namespace

FatModel build_model(const FatConfig& cfg, Precision prec) {
    validate_config(cfg);
    FatModel m;
    m.cfg = cfg;
    m.prec = prec;
    ParamRegistry& reg = m.params;

    const i64 c0 = cfg.stem_mid, c1 = cfg.stem_out;
    const std::array<i64, 4> sc_in{3, c0, c1, c1};
    const std::array<i64, 4> sc_out{c0, c1, c1, c1};
    const std::array<i64, 4> sc_stride{2, 2, 1, 1};
    for (int i = 0; i < 4; ++i) {
        const std::string n = "stem.conv" + std::to_string(i);
        m.stem.convs[i] = make_conv(reg, n, sc_in[i], sc_out[i], 3, sc_stride[i],
                                    1, 1, false, prec);
        m.stem.bns[i] = make_norm(reg, "stem.bn" + std::to_string(i),
                                  NormKind::Batch, sc_out[i], prec);
    }
    m.stem.proj = make_conv(reg, "stem.proj", c1, c1, 1, 1, 0, 1, true, prec);
    m.stem.ln = make_norm(reg, "stem.ln", NormKind::Layer, c1, prec);

    for (int s = 0; s < 4; ++s) {
        const StageConfig& st = cfg.stages[s];
        std::vector<FatBlock> blocks;
        for (i64 b = 0; b < st.blocks; ++b) {
            const std::string pfx =
                "stages." + std::to_string(s) + ".blocks." + std::to_string(b);
            FatBlock blk;
            blk.boundary = (b == st.blocks - 1 && s < 3);
            blk.in_ch = st.channels;
            blk.out_ch = blk.boundary ? cfg.stages[s + 1].channels : st.channels;
            blk.has_cpe = cfg.cpe;
            const i64 C = st.channels;
            if (blk.has_cpe) {
                blk.cpe = make_conv(reg, pfx + ".cpe", C, C, st.cpe_kernel, 1,
                                    (st.cpe_kernel - 1) / 2, C, true, prec);
            }
            blk.ln1 = make_norm(reg, pfx + ".ln1", NormKind::Layer, C, prec);
            FasaConfig fc;
            fc.channels = C;
            fc.heads = st.heads;
            fc.local_kernel = st.fasa_kernel;
            fc.pool_units = st.pool_units;
            fc.fusion = cfg.fusion;
            fc.downsample = cfg.downsample;
            fc.extra_sigmoid = cfg.extra_sigmoid;
            blk.fasa = build_fasa(reg, pfx + ".fasa", fc, prec);
            blk.ln2 = make_norm(reg, pfx + ".ln2", NormKind::Layer, C, prec);
            const i64 hidden = cfg.ffn_ratio * C;
            blk.ffn_fc1 = make_conv(reg, pfx + ".ffn.fc1", C, hidden, 1, 1, 0, 1,
                                    true, prec);
            blk.ffn_dw = make_conv(reg, pfx + ".ffn.dw", hidden, hidden,
                                   cfg.ffn_kernel, blk.boundary ? 2 : 1,
                                   (cfg.ffn_kernel - 1) / 2, hidden, true, prec);
            blk.ffn_fc2 = make_conv(reg, pfx + ".ffn.fc2", hidden, blk.out_ch, 1,
                                    1, 0, 1, true, prec);
            if (blk.boundary) {
                blk.short_dw = make_conv(reg, pfx + ".short.dw", C, C, 3, 2, 1, C,
                                         true, prec);
                blk.short_pw = make_conv(reg, pfx + ".short.pw", C, blk.out_ch, 1,
                                         1, 0, 1, true, prec);
            }
            blocks.push_back(std::move(blk));
        }
        m.stages.push_back(std::move(blocks));
    }

    const i64 c4 = cfg.stages[3].channels;
    m.final_ln = make_norm(reg, "final_ln", NormKind::Layer, c4, prec);
    m.head = make_linear(reg, "head", c4, cfg.num_classes, prec);
    return m;
}

void init_model(FatModel& model, std::uint64_t seed) {
    SplitMix64 rng(seed);
    for (auto& e : model.params.entries()) {
        Tensor& t = e.var->value;
        switch (e.init) {
            case InitKind::Zero:
                for (i64 i = 0; i < t.numel(); ++i) t[i] = 0.0;
                break;
            case InitKind::One:
                for (i64 i = 0; i < t.numel(); ++i) t[i] = 1.0;
                break;
            case InitKind::TruncNormal002:
                for (i64 i = 0; i < t.numel(); ++i) {
                    t[i] = rng.truncated_normal(0.02);
                }
                break;
            case InitKind::FanInNormal: {
                // Conv weight [cout, cin/g, k, k]; fan-in is everything but cout.
                i64 fan_in = 1;
                for (std::size_t d = 1; d < t.rank(); ++d) fan_in *= t.dim(d);
                const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
                for (i64 i = 0; i < t.numel(); ++i) t[i] = rng.normal() * sd;
                break;
            }
        }
        t.quantize();
    }
}

WeightStore to_store(const FatModel& model) {
    WeightStore store;
    for (const auto& e : model.params.entries()) {
        store.add(e.name, e.learned, e.var->value);
    }
    return store;
}

void load_from_store(FatModel& model, const WeightStore& store) {
    if (store.size() != model.params.entries().size()) {
        throw std::runtime_error(
            "weight store has " + std::to_string(store.size()) +
            " tensors, model expects " +
            std::to_string(model.params.entries().size()));
    }
    for (auto& e : model.params.entries()) {
        if (!store.contains(e.name)) {
            throw std::runtime_error("weight store missing tensor: " + e.name);
        }
        const WeightEntry& we = store.get(e.name);
        if (!same_shape(we.tensor, e.var->value)) {
            throw std::runtime_error("shape mismatch for " + e.name + ": store " +
                                     we.tensor.shape_str() + ", model " +
                                     e.var->value.shape_str());
        }
        e.var->value = we.tensor.to(e.var->value.precision());
    }
}

WeightStore init_random(const FatConfig& cfg, std::uint64_t seed) {
    FatModel m = build_model(cfg, Precision::f32);
    init_model(m, seed);
    return to_store(m);
}

Var stem_forward(const FatModel& model, const Var& img) {
    Var h = img;
    for (int i = 0; i < 4; ++i) {
        h = relu(apply_layer(model.stem.bns[i], apply_layer(model.stem.convs[i], h)));
    }
    h = apply_layer(model.stem.proj, h);
    return apply_layer(model.stem.ln, h);
}

Var fat_block_forward(const FatBlock& blk, const Var& x_in, FasaTaps* taps) {
    Var x = blk.has_cpe ? add(apply_layer(blk.cpe, x_in), x_in) : x_in;
    Var y = add(fasa_forward(blk.fasa, apply_layer(blk.ln1, x), taps), x);
    Var h = apply_layer(blk.ffn_fc1, apply_layer(blk.ln2, y));
    h = apply_layer(blk.ffn_fc2, apply_layer(blk.ffn_dw, gelu(h)));
    Var sc = blk.boundary ? apply_layer(blk.short_pw, apply_layer(blk.short_dw, y)) : y;
    return add(h, sc);
}

Var fat_forward(const FatModel& model, const Var& img, StageTaps* taps) {
    Var h = stem_forward(model, img);
    for (const auto& stage : model.stages) {
        for (const auto& blk : stage) {
            // the stage's output lives at its own resolution and width, i.e.
            // just before the boundary block hands off to the next stage
            if (taps && blk.boundary) taps->stage_outputs.push_back(h->value);
            h = fat_block_forward(blk, h);
        }
        if (taps && !stage.back().boundary)
            taps->stage_outputs.push_back(h->value);
    }
    h = global_avg_pool(h);
    h = apply_layer(model.final_ln, h);
    return apply_layer(model.head, h);
}

Tensor fat_forward_infer(const FatModel& model, const Tensor& img) {
    return fat_forward(model, constant(img))->value;
}

FasaTaps fat_block_taps(const FatModel& model, const Tensor& img, i64 stage,
                        i64 block) {
    if (stage < 0 || stage >= static_cast<i64>(model.stages.size())) {
        throw std::invalid_argument("stage index out of range: " +
                                    std::to_string(stage));
    }
    const auto& blocks = model.stages[static_cast<std::size_t>(stage)];
    if (block < 0 || block >= static_cast<i64>(blocks.size())) {
        throw std::invalid_argument("block index out of range: " +
                                    std::to_string(block));
    }
    Var h = stem_forward(model, constant(img));
    FasaTaps taps;
    for (i64 s = 0; s <= stage; ++s) {
        for (i64 b = 0; b < static_cast<i64>(model.stages[s].size()); ++b) {
            const FatBlock& blk = model.stages[s][b];
            const bool target = (s == stage && b == block);
            h = fat_block_forward(blk, h, target ? &taps : nullptr);
            if (target) return taps;
        }
    }
    throw std::logic_error("fat_block_taps: unreachable");
}

}  // namespace fat
