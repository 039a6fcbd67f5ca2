#pragma once

// Active-registration session: a landmark set that can be edited, with the fitted model, slices
// of the dense outputs and export. Mutations are serialized per session; readers work on an
// immutable snapshot, so they see either the state before or after a mutation, never a mix.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpreg/affine.hpp"
#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/field.hpp"
#include "gpreg/io.hpp"
#include "gpreg/kernel_search.hpp"
#include "gpreg/pipeline.hpp"

namespace gpreg {

enum class SliceKind : std::uint8_t { pre_volume, warped_volume, post_volume, uncertainty, field_magnitude };

inline std::string_view to_string(SliceKind k) {
    switch (k) {
        case SliceKind::pre_volume: return "pre_volume";
        case SliceKind::warped_volume: return "warped_volume";
        case SliceKind::post_volume: return "post_volume";
        case SliceKind::uncertainty: return "uncertainty";
        case SliceKind::field_magnitude: return "field_magnitude";
    }
    return "?";
}

inline SliceKind parse_slice_kind(std::string_view s) {
    for (auto k : {SliceKind::pre_volume, SliceKind::warped_volume, SliceKind::post_volume, SliceKind::uncertainty,
                   SliceKind::field_magnitude})
        if (to_string(k) == s) return k;
    throw Error(ErrorCode::invalid_argument, "unknown slice kind '" + std::string(s) + "'");
}

// Row-major frame: pixel (row r, column c) at values[r * width + c]. Columns run along `u`,
// rows along `v`; for a z slice that is u = x, v = y.
struct SliceFrame {
    SliceKind kind = SliceKind::uncertainty;
    Axis axis = Axis::z;
    std::size_t index = 0;
    Axis u = Axis::x;
    Axis v = Axis::y;
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> values;
    GridSpec grid; // 3D grid the slice was cut from
    float min = 0.0f;
    float max = 0.0f;
    std::uint64_t revision = 0;
};

inline nlohmann::json slice_metadata(const SliceFrame& f) {
    const auto ui = static_cast<std::size_t>(f.u), vi = static_cast<std::size_t>(f.v);
    const auto ai = static_cast<std::size_t>(f.axis);
    Point3 origin = f.grid.origin;
    origin[ai] += static_cast<double>(f.index) * f.grid.spacing[ai];
    return {{"kind", std::string(to_string(f.kind))},
            {"axis", std::string(to_string(f.axis))},
            {"index", f.index},
            {"u_axis", std::string(to_string(f.u))},
            {"v_axis", std::string(to_string(f.v))},
            {"dims", {f.width, f.height}},
            {"spacing_mm", {f.grid.spacing[ui], f.grid.spacing[vi]}},
            {"origin_mm", to_json(origin)},
            {"grid", to_json(f.grid)},
            {"min", f.min},
            {"max", f.max},
            {"dtype", "float32"},
            {"order", "row-major"},
            {"revision", f.revision}};
}

inline SliceFrame cut_slice(const GridSpec& grid, std::span<const float> values, Axis axis, std::size_t index) {
    const auto a = static_cast<std::size_t>(axis);
    if (index >= grid.dims[a])
        throw Error(ErrorCode::out_of_range, "slice index out of range",
                    "axis " + std::string(to_string(axis)) + " has " + std::to_string(grid.dims[a]) +
                        " slices, requested " + std::to_string(index));
    SliceFrame f;
    f.axis = axis;
    f.index = index;
    f.grid = grid;
    switch (axis) {
        case Axis::x: f.u = Axis::y; f.v = Axis::z; break;
        case Axis::y: f.u = Axis::x; f.v = Axis::z; break;
        case Axis::z: f.u = Axis::x; f.v = Axis::y; break;
    }
    const auto ui = static_cast<std::size_t>(f.u), vi = static_cast<std::size_t>(f.v);
    f.width = grid.dims[ui];
    f.height = grid.dims[vi];
    f.values.resize(f.width * f.height);
    std::array<std::size_t, 3> ijk{};
    ijk[a] = index;
    for (std::size_t r = 0; r < f.height; ++r)
        for (std::size_t c = 0; c < f.width; ++c) {
            ijk[ui] = c;
            ijk[vi] = r;
            f.values[r * f.width + c] = values[grid.index(ijk[0], ijk[1], ijk[2])];
        }
    if (!f.values.empty()) {
        const auto [lo, hi] = std::minmax_element(f.values.begin(), f.values.end());
        f.min = *lo;
        f.max = *hi;
    }
    return f;
}

struct SessionInputs {
    LandmarkSet landmarks;
    ProjectConfig config;
    std::optional<Volume> pre_volume;
    std::optional<Volume> post_volume;
};

// Grid used for dense outputs when the config gives none: the pre volume's grid, else the
// padded landmark bounding box at 1 mm, coarsened so no axis exceeds 128 voxels.
inline GridSpec session_grid(const SessionInputs& in) {
    if (in.config.grid) return *in.config.grid;
    if (in.pre_volume) return in.pre_volume->grid;
    auto g = default_grid_for(in.landmarks, 1.0);
    const auto largest = *std::max_element(g.dims.begin(), g.dims.end());
    if (largest > 128) g = default_grid_for(in.landmarks, std::ceil(static_cast<double>(largest) / 128.0));
    return g;
}

class Session {
public:
    struct Dense {
        DenseField field;
        UncertaintyMap uncertainty;
        std::vector<float> magnitude;
        std::vector<float> trace;
    };

    struct State {
        State() = default;
        State(State&&) = default;
        State(const State&) = delete; // a copy would share the dense cache across revisions
        State& operator=(const State&) = delete;

        std::uint64_t revision = 0;
        ProjectConfig config;
        GridSpec grid;
        std::shared_ptr<const Volume> pre_volume;
        std::shared_ptr<const Volume> post_volume;
        std::optional<AffineTransform> frozen_affine;
        Registration registration;
        std::optional<VariogramEstimate> variogram; // diagnostics of the last kernel estimate
        std::optional<CVResult> cv;

        [[nodiscard]] const LandmarkSet& landmarks() const { return registration.landmarks; }

        // Lazily computed dense outputs for this revision.
        [[nodiscard]] const Dense& dense() const {
            std::call_once(cache_->dense_once, [&] {
                auto out = generate_dense(registration.models, grid, true, true, config.kernels.threads);
                Dense d{std::move(*out.field), std::move(*out.uncertainty), {}, {}};
                d.magnitude.resize(d.field.vectors.size());
                d.trace.resize(d.field.vectors.size());
                for (std::size_t i = 0; i < d.magnitude.size(); ++i) {
                    d.magnitude[i] = static_cast<float>(d.field.vectors[i].norm());
                    d.trace[i] = static_cast<float>(d.uncertainty.trace[i]);
                }
                cache_->dense = std::make_unique<Dense>(std::move(d));
            });
            return *cache_->dense;
        }

        [[nodiscard]] const Volume& warped() const {
            std::call_once(cache_->warped_once, [&] {
                cache_->warped = std::make_unique<Volume>(
                    resample_through(*post_volume, dense().field, registration.affine).volume);
            });
            return *cache_->warped;
        }

    private:
        struct Cache {
            std::once_flag dense_once;
            std::unique_ptr<Dense> dense;
            std::once_flag warped_once;
            std::unique_ptr<Volume> warped;
        };
        std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
    };

    struct PointVariance {
        std::array<double, 3> per_axis{};
        double trace = 0.0;
    };

    struct AddResult {
        std::int64_t id = 0;
        PointVariance before;
        PointVariance after;
    };

    Session(std::string id, SessionInputs inputs) : id_(std::move(id)) {
        if (inputs.landmarks.empty())
            throw Error(ErrorCode::insufficient_data, "landmark set is empty", "a session needs at least 1 pair");
        require_valid(inputs.landmarks);
        if (inputs.pre_volume) inputs.pre_volume->validate();
        if (inputs.post_volume) inputs.post_volume->validate();

        auto s = std::make_shared<State>();
        s->config = inputs.config;
        s->grid = session_grid(inputs);
        s->grid.validate();
        if (inputs.pre_volume) s->pre_volume = std::make_shared<const Volume>(std::move(*inputs.pre_volume));
        if (inputs.post_volume) s->post_volume = std::make_shared<const Volume>(std::move(*inputs.post_volume));

        const auto stage = fit_affine_stage(inputs.landmarks);
        if (s->config.freeze_affine && stage.available) s->frozen_affine = stage.affine;
        const auto observations = compute_displacements(inputs.landmarks, stage.affine);
        auto est = estimate_kernels(observations, s->config.kernels);
        s->variogram = std::move(est.variogram);
        s->cv = std::move(est.cv);
        s->registration = fit_registration(inputs.landmarks, est.kernels, est.provenance, s->frozen_affine);
        state_ = std::move(s);
    }

    [[nodiscard]] const std::string& id() const { return id_; }

    [[nodiscard]] std::shared_ptr<const State> snapshot() const { return std::atomic_load(&state_); }

    AddResult add_landmark_pair(const Point3& pre, const Point3& post) {
        if (!pre.is_finite() || !post.is_finite())
            throw Error(ErrorCode::invalid_argument, "landmark coordinates must be finite");
        std::lock_guard lock(mutate_);
        const auto cur = snapshot();
        if (const auto* dup = cur->landmarks().find_pre_location(pre))
            throw Error(ErrorCode::duplicate, "pre location duplicates an existing landmark",
                        "landmark id " + std::to_string(dup->id));
        AddResult r;
        r.before = variance_at(*cur, pre);
        auto landmarks = cur->landmarks();
        r.id = landmarks.next_id();
        landmarks.pairs.push_back({r.id, pre, post, LandmarkSource::manual});
        auto next = refit(*cur, std::move(landmarks));
        r.after = variance_at(*next, pre);
        publish(std::move(next));
        return r;
    }

    void remove_landmark(std::int64_t id) {
        std::lock_guard lock(mutate_);
        const auto cur = snapshot();
        if (!cur->landmarks().find(id))
            throw Error(ErrorCode::not_found, "no landmark with id " + std::to_string(id));
        auto landmarks = cur->landmarks();
        std::erase_if(landmarks.pairs, [id](const LandmarkPair& p) { return p.id == id; });
        publish(refit(*cur, std::move(landmarks)));
    }

    struct KernelRequest {
        KernelMode mode = KernelMode::grid;
        std::optional<AxisKernels> manual;
        std::optional<KernelGridSpec> grid;
        std::optional<double> delta;
    };

    void refit_kernel(const KernelRequest& req) {
        if (req.mode == KernelMode::automatic)
            throw Error(ErrorCode::invalid_argument, "kernel refit needs an explicit mode");
        std::lock_guard lock(mutate_);
        const auto cur = snapshot();
        auto settings = cur->config.kernels;
        settings.mode = req.mode;
        if (req.manual) settings.manual = req.manual;
        if (req.grid) settings.grid = *req.grid;
        if (req.delta) settings.variogram.delta = req.delta;
        const auto& reg = cur->registration;
        if (req.mode == KernelMode::variogram)
            require_variogram_eligible(reg.observations.size(), settings.variogram);
        auto est = estimate_kernels(reg.observations, settings);

        auto next = std::make_shared<State>(copy_inputs(*cur));
        next->revision = cur->revision + 1;
        next->variogram = std::move(est.variogram);
        next->cv = std::move(est.cv);
        next->registration = reg;
        next->registration.kernels = est.kernels;
        next->registration.provenance = est.provenance;
        next->registration.models = fit_axis_models(est.kernels, reg.observations);
        publish(std::move(next));
    }

    // Writes <dir>/bundle.json, <dir>/field.{json,raw}, <dir>/uncertainty.{json,raw}.
    nlohmann::json export_to(const std::filesystem::path& dir) const { return export_state(*snapshot(), dir); }

    static nlohmann::json export_state(const State& st, const std::filesystem::path& dir) {
        const auto* s = &st;
        if (s->landmarks().empty())
            throw Error(ErrorCode::precondition, "session has no fitted model to export", "landmark set is empty");
        const auto& d = s->dense();
        const auto bundle_path = dir / "bundle.json";
        write_model_bundle(bundle_path, bundle_of(*s));
        write_field(raster_paths(dir / "field"), d.field);
        write_uncertainty(raster_paths(dir / "uncertainty"), d.uncertainty);
        return {{"revision", s->revision},
                {"bundle", bundle_path.string()},
                {"field", (dir / "field.json").string()},
                {"uncertainty", (dir / "uncertainty.json").string()}};
    }

    [[nodiscard]] static ModelBundle bundle_of(const State& s) {
        ModelBundle b;
        b.affine = s.registration.affine;
        b.affine_available = s.registration.affine_available;
        b.kernels = s.registration.kernels;
        b.provenance = s.registration.provenance;
        b.landmarks = s.landmarks();
        b.grid = s.grid;
        b.variogram = s.variogram;
        b.cv = s.cv;
        b.seed = s.config.kernels.cv_seed;
        b.revision = s.revision;
        return b;
    }

    SliceFrame get_slice(SliceKind kind, Axis axis, std::size_t index) const {
        const auto s = snapshot();
        SliceFrame f;
        switch (kind) {
            case SliceKind::pre_volume:
                if (!s->pre_volume) throw Error(ErrorCode::unavailable, "session has no pre volume");
                f = cut_slice(s->pre_volume->grid, s->pre_volume->scalars, axis, index);
                break;
            case SliceKind::post_volume:
                if (!s->post_volume) throw Error(ErrorCode::unavailable, "session has no post volume");
                f = cut_slice(s->post_volume->grid, s->post_volume->scalars, axis, index);
                break;
            case SliceKind::warped_volume:
                if (!s->post_volume) throw Error(ErrorCode::unavailable, "warped volume needs a post volume");
                check_index(s->grid, axis, index);
                f = cut_slice(s->grid, s->warped().scalars, axis, index);
                break;
            case SliceKind::uncertainty:
                check_index(s->grid, axis, index);
                f = cut_slice(s->grid, s->dense().trace, axis, index);
                break;
            case SliceKind::field_magnitude:
                check_index(s->grid, axis, index);
                f = cut_slice(s->grid, s->dense().magnitude, axis, index);
                break;
        }
        f.kind = kind;
        f.revision = s->revision;
        return f;
    }

    [[nodiscard]] static PointVariance variance_at(const State& s, const Point3& p) {
        PointVariance v;
        const std::array<Point3, 1> q{p};
        for (std::size_t a = 0; a < 3; ++a) {
            v.per_axis[a] = s.registration.models[a].predict_variance(q)[0];
            v.trace += v.per_axis[a];
        }
        return v;
    }

    [[nodiscard]] nlohmann::json summary() const { return summary_of(*snapshot()); }

    [[nodiscard]] static nlohmann::json summary_of(const State& s) {
        const auto& reg = s.registration;
        const auto n = s.landmarks().size();
        std::size_t manual = 0;
        for (const auto& p : s.landmarks().pairs) manual += p.source == LandmarkSource::manual;
        const auto& vs = s.config.kernels.variogram;
        nlohmann::json methods = {
            {"before", {{"available", true}}},
            {"affine", {{"available", reg.affine_available}}},
            {"thin_plate", {{"available", reg.affine_available}}},
            {"variogram_gp", {{"available", n >= vs.min_landmarks}}},
            {"grid_search_gp", {{"available", n >= 2}}},
        };
        if (!reg.affine_available) {
            methods["affine"]["reason"] = reg.affine_reason;
            methods["thin_plate"]["reason"] = reg.affine_reason;
        }
        if (n < vs.min_landmarks)
            methods["variogram_gp"]["reason"] = "below landmark threshold for the variogram method (need >= " +
                                                std::to_string(vs.min_landmarks) + ", have " + std::to_string(n) + ")";
        if (n < 2) methods["grid_search_gp"]["reason"] = "cross-validation needs at least 2 landmarks";
        nlohmann::json j = {{"revision", s.revision},
                            {"landmark_count", n},
                            {"manual_landmark_count", manual},
                            {"affine", to_json(reg.affine)},
                            {"affine_available", reg.affine_available},
                            {"kernels", to_json(reg.kernels)},
                            {"provenance", std::string(to_string(reg.provenance))},
                            {"protocol", n >= 2 ? choose_protocol(n, s.config.kernels.cv_seed).name() : "n/a"},
                            {"methods", methods}};
        if (s.cv) j["cv_selected_error_mm"] = nullable(s.cv->selected_error());
        return j;
    }

    // Full state for clients: summary, landmarks with residuals, grid and diagnostics.
    [[nodiscard]] nlohmann::json state_json() const {
        const auto s = snapshot();
        auto j = summary_of(*s);
        j["id"] = id_;
        j["grid"] = to_json(s->grid);
        j["volumes"] = {{"pre", s->pre_volume != nullptr}, {"post", s->post_volume != nullptr}};
        j["freeze_affine"] = s->config.freeze_affine;

        const auto& reg = s->registration;
        const auto locations = s->landmarks().pre_points();
        const auto mapped = reg.transform(locations);
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < locations.size(); ++i) {
            const auto& p = s->landmarks().pairs[i];
            const auto var = variance_at(*s, p.pre);
            rows.push_back({{"id", p.id},
                            {"pre", to_json(p.pre)},
                            {"post", to_json(p.post)},
                            {"source", std::string(to_string(p.source))},
                            {"displacement_mm", to_json(reg.observations[i].d)},
                            {"before_error_mm", distance(p.pre, p.post)},
                            {"affine_error_mm", distance(apply_affine(reg.affine, p.pre), p.post)},
                            {"residual_mm", distance(mapped[i], p.post)},
                            {"variance_trace_mm2", var.trace}});
        }
        j["landmarks"] = rows;
        if (s->variogram) j["variogram"] = to_json(*s->variogram);
        if (s->cv) j["cv_result"] = to_json(*s->cv);
        return j;
    }

private:
    static void check_index(const GridSpec& grid, Axis axis, std::size_t index) {
        const auto a = static_cast<std::size_t>(axis);
        if (index >= grid.dims[a])
            throw Error(ErrorCode::out_of_range, "slice index out of range",
                        "axis " + std::string(to_string(axis)) + " has " + std::to_string(grid.dims[a]) +
                            " slices, requested " + std::to_string(index));
    }

    static State copy_inputs(const State& cur) {
        State s;
        s.config = cur.config;
        s.grid = cur.grid;
        s.pre_volume = cur.pre_volume;
        s.post_volume = cur.post_volume;
        s.frozen_affine = cur.frozen_affine;
        return s;
    }

    // Landmark edit: kernels stay fixed; the affine (unless frozen) and the GPs are refitted.
    static std::shared_ptr<State> refit(const State& cur, LandmarkSet landmarks) {
        auto next = std::make_shared<State>(copy_inputs(cur));
        next->revision = cur.revision + 1;
        next->variogram = cur.variogram;
        next->cv = cur.cv;
        next->registration =
            fit_registration(landmarks, cur.registration.kernels, cur.registration.provenance, cur.frozen_affine);
        return next;
    }

    void publish(std::shared_ptr<const State> next) { std::atomic_store(&state_, std::move(next)); }

    std::string id_;
    std::mutex mutate_;
    std::shared_ptr<const State> state_;
};

// Owns all sessions of a server process.
class SessionManager {
public:
    std::shared_ptr<Session> create(SessionInputs inputs) {
        std::uint64_t n;
        {
            std::lock_guard lock(mutex_);
            n = ++counter_;
        }
        auto session = std::make_shared<Session>("s" + std::to_string(n), std::move(inputs));
        std::lock_guard lock(mutex_);
        sessions_[session->id()] = session;
        return session;
    }

    std::shared_ptr<Session> get(const std::string& id) const {
        std::lock_guard lock(mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw Error(ErrorCode::not_found, "no session with id '" + id + "'");
        return it->second;
    }

    std::vector<std::shared_ptr<Session>> all() const {
        std::lock_guard lock(mutex_);
        std::vector<std::shared_ptr<Session>> out;
        for (const auto& [_, s] : sessions_) out.push_back(s);
        return out;
    }

    // Persists every session under <dir>/<id>/: landmarks, config and (when fitted) the export.
    void flush(const std::filesystem::path& dir) const {
        for (const auto& s : all()) {
            const auto snap = s->snapshot();
            const auto sub = dir / s->id();
            std::filesystem::create_directories(sub);
            write_landmarks(sub / "landmarks.json", snap->landmarks());
            write_json_file(sub / "config.json", to_json(snap->config));
            if (!snap->landmarks().empty()) s->export_to(sub);
        }
    }

private:
    mutable std::mutex mutex_;
    std::uint64_t counter_ = 0;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

} // namespace gpreg
