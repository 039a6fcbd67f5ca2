// gpreg: command-line entry points for the registration pipeline and the session server.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include "gpreg/eval.hpp"
#include "gpreg/io.hpp"
#include "gpreg/pipeline.hpp"
#include "gpreg/session.hpp"
#include "gpreg/variogram.hpp"
#include "gpreg/version.hpp"

#include "gpreg/http_service.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace gpreg;

namespace {

struct Common {
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
};

std::string describe(const KernelSpec& k) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s sill=%.6g param=%.6g nugget=%.6g (effective range %.4g mm)",
                  std::string(to_string(k.family)).c_str(), k.sill, k.param, k.nugget, k.effective_range());
    return buf;
}

ProjectConfig load_config(const std::string& path, const Common& common) {
    ProjectConfig c = path.empty() ? ProjectConfig{} : read_config(path);
    if (common.seed) c.kernels.cv_seed = *common.seed;
    if (common.threads) c.kernels.threads = common.threads;
    return c;
}

// ---------------------------------------------------------------------------------------------

struct RegisterArgs {
    std::string landmarks, config, out_dir, volume_pre, volume_post;
};

int run_register(const RegisterArgs& a, const Common& common) {
    const auto start = std::chrono::steady_clock::now();
    const auto landmarks = read_landmarks(a.landmarks);
    const auto config = load_config(a.config, common);
    if (landmarks.empty()) throw Error(ErrorCode::insufficient_data, "landmark file has no pairs", a.landmarks);

    std::optional<Volume> pre, post;
    if (!a.volume_pre.empty()) pre = read_volume(raster_paths(a.volume_pre));
    if (!a.volume_post.empty()) post = read_volume(raster_paths(a.volume_post));
    const GridSpec grid = config.grid ? *config.grid : (pre ? pre->grid : default_grid_for(landmarks, 1.0));

    const auto stage = fit_affine_stage(landmarks);
    const auto observations = compute_displacements(landmarks, stage.affine);
    const auto est = estimate_kernels(observations, config.kernels);
    const auto reg = fit_registration(landmarks, est.kernels, est.provenance,
                                      config.freeze_affine && stage.available ? std::optional(stage.affine)
                                                                              : std::nullopt);
    auto dense = generate_dense(reg.models, grid, true, true, config.kernels.threads);

    const fs::path out(a.out_dir);
    fs::create_directories(out);
    ModelBundle bundle;
    bundle.affine = reg.affine;
    bundle.affine_available = reg.affine_available;
    bundle.kernels = reg.kernels;
    bundle.provenance = reg.provenance;
    bundle.landmarks = landmarks;
    bundle.grid = grid;
    bundle.variogram = est.variogram;
    bundle.cv = est.cv;
    bundle.seed = config.kernels.cv_seed;
    write_model_bundle(out / "bundle.json", bundle);
    write_field(raster_paths(out / "field"), *dense.field);
    write_uncertainty(raster_paths(out / "uncertainty"), *dense.uncertainty);
    if (post) write_volume(raster_paths(out / "warped"), resample_through(*post, *dense.field, reg.affine).volume);

    const double runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto n = landmarks.size();
    const std::string protocol = n >= 2 ? choose_protocol(n, config.kernels.cv_seed).name() : "n/a";
    nlohmann::json summary = {{"landmarks", n},
                              {"affine_available", reg.affine_available},
                              {"protocol", protocol},
                              {"provenance", std::string(to_string(reg.provenance))},
                              {"kernels", to_json(reg.kernels)},
                              {"grid", to_json(grid)},
                              {"seed", config.kernels.cv_seed},
                              {"runtime_seconds", runtime}};
    write_json_file(out / "summary.json", summary);

    std::cout << "landmarks: " << n << "\n"
              << "affine: " << (reg.affine_available ? "available" : "unavailable (" + reg.affine_reason + ")") << "\n"
              << "protocol: " << protocol << "\n"
              << "kernel source: " << to_string(reg.provenance) << "\n";
    for (std::size_t ax = 0; ax < 3; ++ax)
        std::cout << "kernel " << to_string(static_cast<Axis>(ax)) << ": " << describe(reg.kernels[ax]) << "\n";
    std::cout << "grid: " << grid.dims[0] << "x" << grid.dims[1] << "x" << grid.dims[2] << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "runtime: %.2f s", runtime);
    std::cout << buf << "\n";
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct VariogramArgs {
    std::string landmarks, bins, axis = "all", out, config;
    std::optional<double> delta;
    bool pooled = false;
};

nlohmann::json fit_or_reason(const EmpiricalVariogram& emp, std::span<const KernelFamily> families) {
    try {
        const auto fit = fit_variogram_model(emp, families);
        nlohmann::json candidates = nlohmann::json::array();
        for (const auto& c : fit.candidates) candidates.push_back(to_json(c));
        return {{"model", to_json(fit.best)}, {"candidates", candidates}};
    } catch (const Error& e) {
        return {{"model", nullptr}, {"fit_failure", std::string(e.what()) + " (" + e.detail() + ")"}};
    }
}

nlohmann::json bins_json(const EmpiricalVariogram& emp) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : emp.bins) bins.push_back({{"h", b.h_mean}, {"gamma", b.gamma_hat}, {"count", b.count}});
    return bins;
}

int run_variogram(const VariogramArgs& a, const Common& common) {
    const auto config = load_config(a.config, common);
    const auto& families = config.kernels.variogram.families;
    nlohmann::json out = {{"version", format_version}};

    if (!a.bins.empty()) {
        // Fit only: {delta?, bins:[{h, gamma, count}]}
        const auto doc = read_json_file(a.bins);
        io_detail::check_keys(doc, {"version", "axis", "delta", "bins"}, a.bins);
        EmpiricalVariogram emp;
        emp.delta = doc.contains("delta") ? io_detail::number(doc["delta"], a.bins + "/delta") : 0.0;
        const auto& bins = io_detail::array(io_detail::field(doc, "bins", a.bins), a.bins + "/bins");
        for (std::size_t i = 0; i < bins.size(); ++i) {
            const auto w = a.bins + "/bins/" + std::to_string(i);
            io_detail::check_keys(bins[i], {"h", "gamma", "count"}, w);
            emp.bins.push_back({io_detail::number(io_detail::field(bins[i], "h", w), w + "/h"),
                                io_detail::number(io_detail::field(bins[i], "gamma", w), w + "/gamma"),
                                static_cast<std::size_t>(
                                    io_detail::unsigned_integer(io_detail::field(bins[i], "count", w), w + "/count"))});
        }
        auto entry = fit_or_reason(emp, families);
        entry["bins"] = bins_json(emp);
        entry["delta"] = emp.delta;
        out["variograms"] = nlohmann::json::array({entry});
        write_json_file(a.out, out);
        std::cout << "bins: " << emp.bins.size() << "\n";
        if (!entry["model"].is_null())
            std::cout << "model: " << entry["model"]["family"].get<std::string>() << " c0=" << entry["model"]["c0"]
                      << " c=" << entry["model"]["c"] << " a=" << entry["model"]["a"] << "\n";
        return 0;
    }

    const auto landmarks = read_landmarks(a.landmarks);
    const auto stage = fit_affine_stage(landmarks);
    const auto obs = compute_displacements(landmarks, stage.affine);
    auto lags = default_lag_settings(obs);
    if (a.delta) lags.delta = *a.delta;
    else if (config.kernels.variogram.delta) lags.delta = *config.kernels.variogram.delta;

    std::vector<std::optional<Axis>> axes;
    if (a.pooled) axes.push_back(std::nullopt);
    else if (a.axis == "all") axes = {Axis::x, Axis::y, Axis::z};
    else axes.push_back(parse_axis(a.axis));

    nlohmann::json entries = nlohmann::json::array();
    std::size_t cloud_size = 0;
    for (const auto& axis : axes) {
        const auto cloud = axis ? variogram_cloud(obs, *axis) : variogram_cloud_pooled(obs);
        auto emp = bin_variogram(cloud, lags.delta, lags.max_lag);
        emp.axis = axis;
        auto entry = fit_or_reason(emp, families);
        entry["axis"] = axis ? std::string(to_string(*axis)) : "pooled";
        entry["cloud_size"] = cloud.size();
        entry["delta"] = lags.delta;
        entry["bins"] = bins_json(emp);
        entries.push_back(entry);
        cloud_size = cloud.size();
        std::cout << "axis " << entry["axis"].get<std::string>() << ": " << emp.bins.size() << " bins";
        if (!entry["model"].is_null())
            std::cout << ", " << entry["model"]["family"].get<std::string>()
                      << " effective range " << entry["model"]["effective_range"].get<double>() << " mm";
        std::cout << "\n";
    }
    out["landmarks"] = landmarks.size();
    out["affine_available"] = stage.available;
    out["cloud_size"] = cloud_size;
    out["delta"] = lags.delta;
    out["max_lag"] = lags.max_lag;
    out["variograms"] = entries;
    write_json_file(a.out, out);
    std::cout << "landmarks: " << landmarks.size() << "\n"
              << "cloud points: " << cloud_size << "\n"
              << "delta: " << lags.delta << " mm\n";
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct GridSearchArgs {
    std::string landmarks, grid, out;
};

int run_gridsearch(const GridSearchArgs& a, const Common& common) {
    const auto landmarks = read_landmarks(a.landmarks);
    KernelGridSpec spec;
    if (!a.grid.empty()) spec = kernel_grid_from_json(read_json_file(a.grid), a.grid);
    const auto stage = fit_affine_stage(landmarks);
    const auto obs = compute_displacements(landmarks, stage.affine);
    const auto seed = common.seed.value_or(default_cv_seed);
    const auto result = grid_search(build_search_grid(spec, obs), obs, seed, common.threads);
    auto doc = to_json(result);
    doc["version"] = format_version;
    doc["landmarks"] = landmarks.size();
    write_json_file(a.out, doc);
    std::cout << "landmarks: " << landmarks.size() << "\n"
              << "protocol: " << result.protocol.name() << "\n"
              << "candidates: " << result.candidates.size() << "\n"
              << "selected: #" << result.selected_index << " cv error " << result.selected_error() << " mm\n";
    for (std::size_t ax = 0; ax < 3; ++ax)
        std::cout << "kernel " << to_string(static_cast<Axis>(ax)) << ": " << describe(result.selected[ax]) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct EvaluateArgs {
    std::string cases, out, config;
    double eval_fraction = 0.3;
};

int run_evaluate(const EvaluateArgs& a, const Common& common) {
    const auto config = load_config(a.config, common);
    if (!fs::is_directory(a.cases)) throw Error(ErrorCode::io, "cases directory not found", a.cases);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(a.cases))
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    const auto seed = common.seed.value_or(default_cv_seed);
    std::vector<EvaluationCase> cases;
    for (const auto& f : files) {
        const auto doc = read_json_file(f);
        if (doc.is_object() && doc.contains("training")) {
            auto c = evaluation_case_from_json(doc, f.string());
            if (c.name.empty()) c.name = f.stem().string();
            cases.push_back(std::move(c));
        } else {
            cases.push_back(split_landmarks(landmarks_from_json(doc, f.string()), seed, a.eval_fraction,
                                            f.stem().string()));
        }
    }

    ProtocolSettings settings;
    settings.kernels = config.kernels;
    settings.methods = config.methods;
    const auto results = run_cases(cases, settings, common.threads);
    std::cout << render_report(results);
    auto doc = report_to_json(results);
    doc["seed"] = seed;
    write_json_file(a.out, doc);
    bool over = false;
    for (const auto& r : results)
        if (r.over_budget) {
            std::cerr << "error: case '" << r.name << "' exceeded the " << case_time_budget_seconds
                      << " s time budget\n";
            over = true;
        }
    return over ? 1 : 0;
}

// ---------------------------------------------------------------------------------------------

struct SynthArgs {
    std::string out_dir;
    std::size_t landmarks = 80;
    std::size_t count = 1;
    double extent = 100.0;
    double sill = 4.0;
    double range = 50.0;
    double nugget = 0.01;
    std::string family = "gaussian";
    double affine_linear = 0.05;
    double affine_translation = 5.0;
    std::size_t volume_dims = 0;
    bool no_field = false;
};

int run_synth(const SynthArgs& a, const Common& common) {
    const fs::path out(a.out_dir);
    fs::create_directories(out);
    const auto base_seed = common.seed.value_or(1);
    for (std::size_t i = 0; i < a.count; ++i) {
        SyntheticSpec spec;
        spec.seed = base_seed + i;
        spec.landmarks = a.landmarks;
        spec.extent = a.extent;
        spec.affine_linear = a.affine_linear;
        spec.affine_translation = a.affine_translation;
        if (a.no_field) spec.field_kernel.reset();
        else spec.field_kernel = KernelSpec::from_effective_range(parse_kernel_family(a.family), a.sill, a.range, a.nugget);
        if (a.volume_dims > 0) {
            GridSpec g;
            g.dims = {a.volume_dims, a.volume_dims, a.volume_dims};
            const double s = a.extent / static_cast<double>(a.volume_dims - 1 > 0 ? a.volume_dims - 1 : 1);
            g.spacing = {s, s, s};
            spec.volume_grid = g;
        }
        const auto c = generate_synthetic_case(spec);
        const auto stem = "case-" + std::to_string(spec.seed);
        write_evaluation_case(out / (stem + ".json"), to_evaluation_case(c));
        LandmarkSet all = c.training;
        all.pairs.insert(all.pairs.end(), c.evaluation.pairs.begin(), c.evaluation.pairs.end());
        std::sort(all.pairs.begin(), all.pairs.end(), [](const auto& x, const auto& y) { return x.id < y.id; });
        fs::create_directories(out / "landmarks");
        write_landmarks(out / "landmarks" / (stem + ".json"), all);
        if (c.pre_volume) {
            fs::create_directories(out / "volumes");
            write_volume(raster_paths(out / "volumes" / (stem + "-pre")), *c.pre_volume);
            write_volume(raster_paths(out / "volumes" / (stem + "-post")), *c.post_volume);
        }
        std::cout << stem << ": " << c.training.size() << " training, " << c.evaluation.size() << " evaluation\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct ServeArgs {
    std::string bind = "127.0.0.1:8080";
    std::string data_dir;
    std::string static_dir;
};

std::pair<std::string, int> split_address(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw Error(ErrorCode::invalid_argument, "bind address must be HOST:PORT", addr);
    const auto host = addr.substr(0, colon);
    int port = -1;
    try {
        std::size_t used = 0;
        port = std::stoi(addr.substr(colon + 1), &used);
        if (used != addr.size() - colon - 1) port = -1;
    } catch (const std::exception&) {
        port = -1;
    }
    if (host.empty() || port < 0 || port > 65535)
        throw Error(ErrorCode::invalid_argument, "bind address must be HOST:PORT", addr);
    return {host, port};
}

int run_serve(const ServeArgs& a, const Common&) {
    const auto [host, port] = split_address(a.bind);

    // SIGINT/SIGTERM are handled by a watcher thread; block them everywhere else.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    HttpService service(a.data_dir);
    if (!a.static_dir.empty() && !service.mount_static(a.static_dir))
        throw Error(ErrorCode::io, "static directory not found", a.static_dir);
    const int bound = service.bind(host, port);
    if (bound < 0) {
        std::cerr << "error: cannot bind " << a.bind << " (address in use or unavailable)\n";
        return 1;
    }
    std::cout << "listening on http://" << host << ":" << bound << std::endl;

    std::thread watcher([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        service.stop();
    });
    service.listen_after_bind();
    // If the server stopped on its own, wake the watcher.
    pthread_kill(watcher.native_handle(), SIGTERM);
    watcher.join();
    service.flush();
    std::cout << "stopped" << std::endl;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Landmark-driven dense deformation with Gaussian-process interpolation and uncertainty maps.",
                 "gpreg"};
    app.set_version_flag("--version", std::string(gpreg::version));
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    app.add_option("--seed", common.seed, "Seed for fold shuffles and synthetic data (recorded in outputs)");
    app.add_option("--threads", common.threads, "Worker thread cap (0 = all cores)")->default_val(0);

    RegisterArgs reg;
    auto* c_reg = app.add_subcommand("register", "Affine + kernel estimation + GP fit; writes field, uncertainty, bundle");
    c_reg->add_option("--landmarks", reg.landmarks, "Landmark pairs JSON")->required();
    c_reg->add_option("--config", reg.config, "Project config JSON");
    c_reg->add_option("--out-dir", reg.out_dir, "Output directory")->required();
    c_reg->add_option("--volume-pre", reg.volume_pre, "Pre volume raster base path (BASE.json + BASE.raw)");
    c_reg->add_option("--volume-post", reg.volume_post, "Post volume raster base path; warped copy written as warped.*");

    VariogramArgs vg;
    auto* c_vg = app.add_subcommand("variogram", "Empirical variogram and fitted model as JSON");
    auto* vg_lm = c_vg->add_option("--landmarks", vg.landmarks, "Landmark pairs JSON");
    auto* vg_bins = c_vg->add_option("--bins", vg.bins, "Fit a model to given bins instead ({bins:[{h,gamma,count}]})");
    vg_lm->excludes(vg_bins);
    c_vg->add_option("--axis", vg.axis, "Displacement axis")->check(CLI::IsMember({"x", "y", "z", "all"}))->default_val("all");
    c_vg->add_flag("--pooled", vg.pooled, "Pool all three axes into one variogram");
    c_vg->add_option("--delta", vg.delta, "Bin half-width in mm (bins are 2*delta wide)")->check(CLI::PositiveNumber);
    c_vg->add_option("--config", vg.config, "Project config JSON");
    c_vg->add_option("--out", vg.out, "Output JSON path")->required();

    GridSearchArgs gs;
    auto* c_gs = app.add_subcommand("gridsearch", "Cross-validated kernel grid search; writes the CV table");
    c_gs->add_option("--landmarks", gs.landmarks, "Landmark pairs JSON")->required();
    c_gs->add_option("--grid", gs.grid, "Kernel grid JSON (default grid when omitted)");
    c_gs->add_option("--out", gs.out, "Output JSON path")->required();

    EvaluateArgs ev;
    auto* c_ev = app.add_subcommand("evaluate", "Held-out landmark error per method over a directory of cases");
    c_ev->add_option("--cases", ev.cases, "Directory of case or landmark JSON files")->required();
    c_ev->add_option("--out", ev.out, "Output JSON report path")->required();
    c_ev->add_option("--config", ev.config, "Project config JSON");
    c_ev->add_option("--eval-fraction", ev.eval_fraction, "Held-out share for plain landmark files")
        ->check(CLI::Range(0.0, 0.95))
        ->default_val(0.3);

    SynthArgs sy;
    auto* c_sy = app.add_subcommand("synth", "Write seeded synthetic cases (and optional volume pairs)");
    c_sy->add_option("--out-dir", sy.out_dir, "Output directory")->required();
    c_sy->add_option("--landmarks", sy.landmarks, "Landmarks per case (training + evaluation)")->default_val(80);
    c_sy->add_option("--count", sy.count, "Number of cases; seeds run from --seed upward")->default_val(1);
    c_sy->add_option("--extent", sy.extent, "Cube edge in mm")->default_val(100.0);
    c_sy->add_option("--family", sy.family, "Field kernel family")
        ->check(CLI::IsMember({"gaussian", "exponential"}))
        ->default_val("gaussian");
    c_sy->add_option("--sill", sy.sill, "Field sill in mm^2")->default_val(4.0);
    c_sy->add_option("--range", sy.range, "Field effective range in mm")->default_val(50.0);
    c_sy->add_option("--nugget", sy.nugget, "Observation noise variance in mm^2")->default_val(0.01);
    c_sy->add_option("--affine-linear", sy.affine_linear, "Max perturbation of the linear part")->default_val(0.05);
    c_sy->add_option("--affine-translation", sy.affine_translation, "Max translation in mm")->default_val(5.0);
    c_sy->add_option("--volume-dims", sy.volume_dims, "Also write a volume pair with this many voxels per axis")
        ->default_val(0);
    c_sy->add_flag("--no-field", sy.no_field, "Affine-only deformation");

    ServeArgs sv;
    auto* c_sv = app.add_subcommand("serve", "Run the HTTP session service until interrupted");
    c_sv->add_option("--bind", sv.bind, "HOST:PORT to listen on (port 0 picks a free port)")->default_val("127.0.0.1:8080");
    c_sv->add_option("--data-dir", sv.data_dir, "Directory for exports and the session flush on shutdown");
    c_sv->add_option("--static", sv.static_dir, "Serve browser client files from this directory at /ui");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*c_reg) return run_register(reg, common);
        if (*c_vg) {
            if (vg.landmarks.empty() && vg.bins.empty()) {
                std::cerr << "error: variogram needs --landmarks or --bins\n";
                return 2;
            }
            return run_variogram(vg, common);
        }
        if (*c_gs) return run_gridsearch(gs, common);
        if (*c_ev) return run_evaluate(ev, common);
        if (*c_sy) return run_synth(sy, common);
        if (*c_sv) return run_serve(sv, common);
    } catch (const gpreg::Error& e) {
        std::cerr << "error: " << e.what();
        if (!e.detail().empty()) std::cerr << ": " << e.detail();
        std::cerr << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
