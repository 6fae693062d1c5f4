// fat: command-line front end for the FAT/FASA engine.
//
// Subcommands: describe, forward, gradcheck, spectra, bench, ablate.
// Exit codes: 0 success, 1 usage error, 2 numeric/validation failure.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "fat/accounting.hpp"
#include "fat/image.hpp"
#include "fat/model.hpp"
#include "fat/rng.hpp"
#include "fat/spectral.hpp"

namespace {

using namespace fat;

std::uint64_t default_seed() {
    if (const char* env = std::getenv("FAT_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end && *end == '\0' && end != env) return v;
        throw std::invalid_argument(std::string("FAT_SEED is not an integer: ") +
                                    env);
    }
    return 0;
}

struct ModelArgs {
    std::string preset = "B0";
    std::string config_path;
    std::string fusion = "interaction";
    std::string downsample = "refined";
    bool no_cpe = false;
    bool extra_sigmoid = false;
};

void add_model_args(CLI::App* cmd, ModelArgs& a) {
    cmd->add_option("--preset", a.preset,
                    "Model preset (B0|B1|B2|B3|B3-ST|tiny)");
    cmd->add_option("--config", a.config_path,
                    "key=value config file (overrides --preset)");
    cmd->add_option("--fusion", a.fusion,
                    "interaction|add-linear|cat-linear|mul-linear");
    cmd->add_option("--downsample", a.downsample,
                    "refined|pool-down|conv-no-overlap|conv-overlap");
    cmd->add_flag("--no-cpe", a.no_cpe, "Disable the positional-encoding residual");
    cmd->add_flag("--extra-sigmoid", a.extra_sigmoid,
                  "Pre-simplification fusion (extra sigmoid gate)");
}

FatConfig resolve_config(const ModelArgs& a) {
    FatConfig cfg = a.config_path.empty() ? build_preset(a.preset)
                                          : load_config_file(a.config_path);
    cfg.fusion = fusion_from_string(a.fusion);
    cfg.downsample = downsample_from_string(a.downsample);
    if (a.no_cpe) cfg.cpe = false;
    if (a.extra_sigmoid) cfg.extra_sigmoid = true;
    return cfg;
}

Tensor random_image(i64 resolution, std::uint64_t seed) {
    SplitMix64 rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    Tensor img({1, 3, resolution, resolution});
    for (i64 i = 0; i < img.numel(); ++i) img[i] = rng.normal();
    img.quantize();
    return img;
}

int cmd_describe(const ModelArgs& margs, i64 resolution, bool csv) {
    const FatConfig cfg = resolve_config(margs);
    const auto specs = enumerate_layers(cfg, resolution);
    std::cout << budget_table(specs, csv);
    return 0;
}

int cmd_forward(const ModelArgs& margs, const std::string& weights_path,
                const std::string& image_path, bool zero_image,
                std::uint64_t seed, i64 resolution) {
    const FatConfig cfg = resolve_config(margs);
    FatModel model = build_model(cfg);
    if (!weights_path.empty()) {
        load_from_store(model, WeightStore::load(weights_path));
    } else {
        init_model(model, seed);
    }
    Tensor img;
    if (!image_path.empty()) {
        img = load_image_ppm(image_path, resolution, true);
    } else if (zero_image) {
        img = Tensor({1, 3, resolution, resolution});
    } else {
        img = random_image(resolution, seed);
    }
    const Tensor logits = fat_forward_infer(model, img);
    const i64 n = logits.dim(1);
    std::vector<i64> idx(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](i64 a, i64 b) { return logits[a] > logits[b]; });
    for (i64 i = 0; i < n; ++i) {
        if (!std::isfinite(logits[i])) {
            std::cerr << "forward produced non-finite logits\n";
            return 2;
        }
    }
    const i64 top = std::min<i64>(5, n);
    std::cout << "top-" << top << " logits (" << n << " classes):\n";
    for (i64 i = 0; i < top; ++i) {
        std::cout << std::setw(6) << idx[static_cast<std::size_t>(i)] << "  "
                  << std::setprecision(9) << logits[idx[static_cast<std::size_t>(i)]]
                  << '\n';
    }
    return 0;
}

int cmd_gradcheck(const ModelArgs& margs, std::uint64_t seed, double tolerance,
                  i64 resolution) {
    const FatConfig cfg = resolve_config(margs);
    {
        FatModel probe = build_model(cfg, Precision::f64);
        const i64 learned = to_store(probe).scalar_count(true);
        if (learned > 50000) {
            std::cerr << "gradcheck: config has " << learned
                      << " learned parameters; the finite-difference sweep is "
                         "exhaustive and capped at 50000.\n"
                      << "Use --preset tiny or a comparably small --config.\n";
            return 1;
        }
    }
    FatModel model = build_model(cfg, Precision::f64);
    init_model(model, seed);
    Tensor img = random_image(resolution, seed).to(Precision::f64);

    std::vector<Var> wrt;
    for (const auto& e : model.params.entries()) {
        if (e.learned) wrt.push_back(e.var);
    }
    std::unordered_map<const Node*, Tensor> grads;
    {
        Tape tape;
        for (const auto& v : wrt) tape.touch_leaf(v);
        Var loss = mean_all(fat_forward(model, constant(img)));
        grads = tape.gradients(loss, wrt);
    }
    // Central differences over every learned element. Primary step 1e-4; an
    // element that exceeds tolerance is re-measured at 1e-5 and the better of
    // the two errors counts. High-curvature elements are truncation-limited at
    // the large step and round-off drowns near-zero gradients at the small
    // one, so each noise regime has a step that resolves it; a wrong adjoint
    // fails at both.
    auto loss = [&]() {
        return mean_all(fat_forward(model, constant(img)))->value[0];
    };
    double worst = 0.0;
    std::string worst_name;
    bool ok = true;
    std::cout << std::left << std::setw(36) << "parameter" << std::right
              << std::setw(10) << "elements" << std::setw(16) << "max rel err"
              << '\n';
    for (const auto& e : model.params.entries()) {
        if (!e.learned) continue;
        Tensor& t = e.var->value;
        const Tensor& g = grads.at(e.var.get());
        double gmax = 0.0;
        for (i64 i = 0; i < t.numel(); ++i) {
            const double saved = t[i];
            const double ad = g[i];
            double rel = 0.0;
            for (double step : {1e-4, 3e-5, 1e-5}) {
                t[i] = saved + step;
                const double up = loss();
                t[i] = saved - step;
                const double dn = loss();
                t[i] = saved;
                const double fd = (up - dn) / (2.0 * step);
                const double denom =
                    std::max({std::fabs(fd), std::fabs(ad), 1e-8});
                const double r = std::fabs(fd - ad) / denom;
                if (step == 1e-4 || r < rel) rel = r;
                if (rel <= tolerance) break;
            }
            gmax = std::max(gmax, rel);
        }
        std::cout << std::left << std::setw(36) << e.name << std::right
                  << std::setw(10) << t.numel() << std::setw(16)
                  << std::setprecision(3) << std::scientific << gmax
                  << std::defaultfloat << '\n';
        if (gmax > worst) {
            worst = gmax;
            worst_name = e.name;
        }
        if (gmax > tolerance) ok = false;
    }
    std::cout << (ok ? "PASS" : "FAIL") << ": worst " << std::scientific
              << std::setprecision(3) << worst << std::defaultfloat << " at "
              << worst_name << " (tolerance " << tolerance << ")\n";
    return ok ? 0 : 2;
}

int cmd_spectra(const ModelArgs& margs, const std::string& weights_path,
                const std::string& image_path, std::uint64_t seed,
                i64 resolution, i64 stage, i64 block,
                const std::string& branch_str, const std::string& channels_str,
                const std::string& out_dir) {
    const FatConfig cfg = resolve_config(margs);
    FatModel model = build_model(cfg);
    if (!weights_path.empty()) {
        load_from_store(model, WeightStore::load(weights_path));
    } else {
        init_model(model, seed);
    }
    Tensor img = image_path.empty()
                     ? random_image(resolution, seed)
                     : load_image_ppm(image_path, resolution, true);
    const Branch branch = branch_from_string(branch_str);
    std::vector<i64> channels;
    {
        std::istringstream ss(channels_str);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) channels.push_back(std::stoll(tok));
        }
    }
    if (channels.empty()) {
        throw std::invalid_argument("spectra: no channels requested");
    }
    std::filesystem::create_directories(out_dir);
    const auto spectra =
        branch_spectra(model, img, stage, block, branch, channels, true);
    for (const auto& s : spectra) {
        const std::string base =
            out_dir + "/" + spectrum_basename(stage, block, branch, s.channel);
        save_spectrum_csv(s, base + ".csv");
        save_spectrum_pgm(s, base + ".pgm");
        std::cout << base << ".csv\n" << base << ".pgm\n";
    }
    return 0;
}

int cmd_bench(const ModelArgs& margs, std::uint64_t seed, i64 resolution,
              i64 batch, i64 iters, i64 warmup, i64 threads, bool csv) {
    if (iters < 1) throw std::invalid_argument("bench: --iters must be >= 1");
    if (batch < 1 || warmup < 0 || threads < 1) {
        throw std::invalid_argument("bench: bad --batch/--warmup/--threads");
    }
    const FatConfig cfg = resolve_config(margs);
    FatModel model = build_model(cfg);
    init_model(model, seed);
    const i64 per_thread = (batch + threads - 1) / threads;
    std::vector<Tensor> inputs;
    for (i64 t = 0; t < threads; ++t) {
        const i64 n = std::min(per_thread, batch - t * per_thread);
        if (n < 1) break;
        Tensor img({n, 3, resolution, resolution});
        SplitMix64 rng(seed + static_cast<std::uint64_t>(t) + 1);
        for (i64 i = 0; i < img.numel(); ++i) img[i] = rng.normal();
        img.quantize();
        inputs.push_back(std::move(img));
    }
    auto run_once = [&]() {
        if (inputs.size() == 1) {
            fat_forward_infer(model, inputs[0]);
            return;
        }
        std::vector<std::thread> workers;
        for (const auto& in : inputs) {
            workers.emplace_back([&model, &in]() { fat_forward_infer(model, in); });
        }
        for (auto& w : workers) w.join();
    };
    for (i64 i = 0; i < warmup; ++i) run_once();
    std::vector<double> imgs_per_s;
    for (i64 i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        const auto t1 = std::chrono::steady_clock::now();
        const double sec = std::chrono::duration<double>(t1 - t0).count();
        imgs_per_s.push_back(static_cast<double>(batch) / sec);
    }
    std::sort(imgs_per_s.begin(), imgs_per_s.end());
    auto pct = [&](double p) {
        const double pos = p * static_cast<double>(imgs_per_s.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, imgs_per_s.size() - 1);
        const double f = pos - static_cast<double>(lo);
        return imgs_per_s[lo] * (1.0 - f) + imgs_per_s[hi] * f;
    };
    const std::string variant =
        to_string(cfg.fusion) + (cfg.extra_sigmoid ? "+extra-sigmoid" : "") +
        (cfg.cpe ? "" : "+no-cpe");
    std::ostringstream row;
    row << std::fixed << std::setprecision(3);
    if (csv) {
        row << "preset,variant,batch,resolution,iters,median_imgs_s,p10_imgs_s,"
               "p90_imgs_s\n"
            << margs.preset << ',' << variant << ',' << batch << ','
            << resolution << ',' << iters << ',' << pct(0.5) << ',' << pct(0.1)
            << ',' << pct(0.9) << '\n';
    } else {
        row << "preset " << margs.preset << "  variant " << variant
            << "  batch " << batch << "  res " << resolution << "  iters "
            << iters << "  imgs/s median " << pct(0.5) << "  p10 " << pct(0.1)
            << "  p90 " << pct(0.9) << '\n';
    }
    std::cout << row.str();
    return 0;
}

int cmd_ablate(const ModelArgs& margs, const std::string& axis, i64 resolution,
               bool csv) {
    FatConfig base = resolve_config(margs);
    struct Row {
        std::string label;
        Budget budget;
    };
    std::vector<Row> rows;
    auto add = [&](const std::string& label, const FatConfig& cfg) {
        rows.push_back({label, total_budget(enumerate_layers(cfg, resolution),
                                            resolution)});
    };
    if (axis == "fusion") {
        for (Fusion f : {Fusion::AddLinear, Fusion::CatLinear, Fusion::MulLinear,
                         Fusion::Interaction}) {
            FatConfig c = base;
            c.fusion = f;
            add(to_string(f), c);
        }
    } else if (axis == "downsample") {
        for (Downsample d : {Downsample::PoolDown, Downsample::ConvNoOverlap,
                             Downsample::ConvOverlap, Downsample::Refined}) {
            FatConfig c = base;
            c.downsample = d;
            add(to_string(d), c);
        }
    } else if (axis == "cpe") {
        FatConfig off = base;
        off.cpe = false;
        add("no-cpe", off);
        FatConfig on = base;
        on.cpe = true;
        add("cpe", on);
    } else {
        throw std::invalid_argument("ablate: unknown axis '" + axis +
                                    "' (expected fusion|downsample|cpe)");
    }
    if (csv) {
        std::cout << "variant,params,flops,accuracy\n";
        for (const auto& r : rows) {
            std::cout << r.label << ',' << r.budget.params << ','
                      << r.budget.flops << ",requires training - out of scope\n";
        }
        return 0;
    }
    std::cout << std::left << std::setw(18) << "variant" << std::right
              << std::setw(12) << "params(M)" << std::setw(12) << "flops(G)"
              << "  accuracy\n";
    for (const auto& r : rows) {
        std::cout << std::left << std::setw(18) << r.label << std::right
                  << std::fixed << std::setprecision(3) << std::setw(12)
                  << static_cast<double>(r.budget.params) / 1e6 << std::setw(12)
                  << static_cast<double>(r.budget.flops) / 1e9
                  << "  requires training - out of scope\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FAT backbone engine: budgets, inference, gradient checks, "
                 "spectra, and micro-benchmarks"};
    app.require_subcommand(1);

    ModelArgs margs;
    i64 resolution = 224;
    bool csv = false;
    std::uint64_t seed = 0;
    bool seed_given = false;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed,--random-seed", seed,
                        "PRNG seed (default: FAT_SEED env var, else 0)")
            ->each([&](const std::string&) { seed_given = true; });
    };

    auto* describe = app.add_subcommand("describe",
                                        "Per-layer and total params/FLOPs");
    add_model_args(describe, margs);
    describe->add_option("--resolution", resolution, "Square input resolution");
    describe->add_flag("--csv", csv, "CSV output");

    std::string weights_path, image_path;
    bool zero_image = false;
    auto* forward = app.add_subcommand("forward", "Run inference, print top-5");
    add_model_args(forward, margs);
    forward->add_option("--weights", weights_path, "FATW weight file");
    forward->add_option("--image", image_path, "P6 PPM image");
    forward->add_flag("--zero-image", zero_image, "All-zero input");
    forward->add_option("--resolution", resolution, "Square input resolution");
    add_seed(forward);

    double tolerance = 1e-4;
    auto* gradcheck = app.add_subcommand(
        "gradcheck", "Finite-difference verification of all adjoints");
    add_model_args(gradcheck, margs);
    gradcheck->add_option("--tolerance", tolerance, "Max relative error");
    gradcheck->add_option("--resolution", resolution,
                          "Square input resolution (small!)");
    add_seed(gradcheck);

    i64 stage = 0, block = 0;
    std::string branch = "local", channels = "0,1,2,3,4,5,6,7",
                out_dir = "spectra";
    auto* spectra = app.add_subcommand(
        "spectra", "Export branch DFT spectra as CSV + PGM");
    add_model_args(spectra, margs);
    spectra->add_option("--weights", weights_path, "FATW weight file");
    spectra->add_option("--image", image_path, "P6 PPM image");
    spectra->add_option("--stage", stage, "Stage index 0-3");
    spectra->add_option("--block", block, "Block index within the stage");
    spectra->add_option("--branch", branch,
                        "local|global|fused-add-linear|fused-interaction");
    spectra->add_option("--channels", channels, "Comma-separated channel list");
    spectra->add_option("--out-dir", out_dir, "Output directory");
    spectra->add_option("--resolution", resolution, "Square input resolution");
    add_seed(spectra);

    i64 batch = 1, iters = 10, warmup = 2, threads = 1;
    auto* bench = app.add_subcommand("bench", "Forward-pass throughput");
    add_model_args(bench, margs);
    bench->add_option("--batch", batch, "Images per iteration");
    bench->add_option("--iters", iters, "Timed iterations");
    bench->add_option("--warmup", warmup, "Untimed warmup iterations");
    bench->add_option("--threads", threads, "Worker threads (split the batch)");
    bench->add_option("--resolution", resolution, "Square input resolution");
    bench->add_flag("--csv", csv, "CSV output");
    add_seed(bench);

    std::string axis = "fusion";
    auto* ablate = app.add_subcommand("ablate",
                                      "Variant comparison table (budgets)");
    add_model_args(ablate, margs);
    ablate->add_option("--axis", axis, "fusion|downsample|cpe");
    ablate->add_option("--resolution", resolution, "Square input resolution");
    ablate->add_flag("--csv", csv, "CSV output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 1;
    }

    try {
        if (!seed_given) seed = default_seed();
        if (describe->parsed()) return cmd_describe(margs, resolution, csv);
        if (forward->parsed()) {
            return cmd_forward(margs, weights_path, image_path, zero_image, seed,
                               resolution);
        }
        if (gradcheck->parsed()) {
            if (resolution == 224) resolution = 32;  // sane default for FD
            return cmd_gradcheck(margs, seed, tolerance, resolution);
        }
        if (spectra->parsed()) {
            return cmd_spectra(margs, weights_path, image_path, seed, resolution,
                               stage, block, branch, channels, out_dir);
        }
        if (bench->parsed()) {
            return cmd_bench(margs, seed, resolution, batch, iters, warmup,
                             threads, csv);
        }
        if (ablate->parsed()) return cmd_ablate(margs, axis, resolution, csv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
