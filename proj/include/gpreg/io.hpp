#pragma once

// File formats, version 1.
//
// Landmarks   {version:1, pairs:[{id, pre:[x,y,z], post:[x,y,z], source:"file"|"manual"}]}
// Rasters     little-endian float32 payload + JSON sidecar
//             {version:1, dims, spacing_mm, origin_mm, components, order:"x-fastest"}
//             components are interleaved per voxel; voxels run x-fastest.
// Bundle      one JSON document with affine, kernels, landmark snapshot and provenance.
// Config      see ProjectConfig below.
//
// Every reader is total: malformed input produces gpreg::Error, never a crash.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpreg/affine.hpp"
#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/field.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/kernel_search.hpp"
#include "gpreg/pipeline.hpp"
#include "gpreg/variogram.hpp"

namespace gpreg {

using json = nlohmann::json;

inline constexpr int format_version = 1;

// ---------------------------------------------------------------------------------------------
// Plumbing

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open file for reading", path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open file for writing", path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(ErrorCode::io, "write failed", path.string());
}

inline json parse_json_text(std::string_view text, const std::string& source = "<input>") {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        std::size_t line = 1, column = 1;
        const auto limit = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        for (std::size_t i = 0; i < limit; ++i) {
            if (text[i] == '\n') {
                ++line;
                column = 1;
            } else {
                ++column;
            }
        }
        throw Error(ErrorCode::schema,
                    "malformed JSON in " + source + " at line " + std::to_string(line) + ", column " +
                        std::to_string(column),
                    e.what());
    } catch (const json::exception& e) {
        // Syntactically fine but unrepresentable, e.g. a number literal that overflows a double.
        throw Error(ErrorCode::schema, "invalid JSON in " + source, e.what());
    }
}

inline json read_json_file(const std::filesystem::path& path) {
    return parse_json_text(read_text_file(path), path.string());
}

inline void write_json_file(const std::filesystem::path& path, const json& doc) {
    write_text_file(path, doc.dump(2) + "\n");
}

namespace io_detail {

[[noreturn]] inline void schema_error(const std::string& where, const std::string& what) {
    throw Error(ErrorCode::schema, where + ": " + what);
}

inline void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) schema_error(where, "expected an object");
}

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
    require_object(j, where);
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) schema_error(where, "unknown field '" + key + "'");
    }
}

inline const json& field(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) schema_error(where, std::string("missing field '") + key + "'");
    return *it;
}

inline double number(const json& j, const std::string& where) {
    if (!j.is_number()) schema_error(where, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) schema_error(where, "number is not finite");
    return v;
}

inline std::int64_t integer(const json& j, const std::string& where) {
    if (!j.is_number_integer()) schema_error(where, "expected an integer");
    if (j.is_number_unsigned() && j.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX))
        schema_error(where, "integer out of range");
    return j.get<std::int64_t>();
}

inline std::uint64_t unsigned_integer(const json& j, const std::string& where) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
        schema_error(where, "expected a non-negative integer");
    return j.get<std::uint64_t>();
}

inline bool boolean(const json& j, const std::string& where) {
    if (!j.is_boolean()) schema_error(where, "expected true or false");
    return j.get<bool>();
}

inline std::string string(const json& j, const std::string& where) {
    if (!j.is_string()) schema_error(where, "expected a string");
    return j.get<std::string>();
}

inline const json& array(const json& j, const std::string& where) {
    if (!j.is_array()) schema_error(where, "expected an array");
    return j;
}

template <std::size_t N>
std::array<double, N> number_array(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != N) schema_error(where, "expected an array of " + std::to_string(N) + " numbers");
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = number(j[i], where + "/" + std::to_string(i));
    return out;
}

inline void check_version(const json& j, const std::string& where, bool required = true) {
    auto it = j.find("version");
    if (it == j.end()) {
        if (required) schema_error(where, "missing field 'version'");
        return;
    }
    const auto v = integer(*it, where + "/version");
    if (v != format_version)
        throw Error(ErrorCode::unsupported_version, "unsupported format version " + std::to_string(v),
                    where + ": this build reads version " + std::to_string(format_version));
}

template <typename Parse>
auto wrap(const std::string& source, Parse&& parse) -> decltype(parse()) {
    try {
        return parse();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw Error(ErrorCode::schema, source + ": " + e.what());
    }
}

} // namespace io_detail

inline json to_json(const Point3& p) { return json::array({p.x, p.y, p.z}); }

inline Point3 point_from_json(const json& j, const std::string& where) {
    const auto a = io_detail::number_array<3>(j, where);
    return {a[0], a[1], a[2]};
}

// ---------------------------------------------------------------------------------------------
// Landmarks

inline json landmarks_to_json(const LandmarkSet& set) {
    json pairs = json::array();
    for (const auto& p : set.pairs)
        pairs.push_back({{"id", p.id}, {"pre", to_json(p.pre)}, {"post", to_json(p.post)},
                         {"source", std::string(to_string(p.source))}});
    return {{"version", format_version}, {"pairs", pairs}};
}

inline LandmarkPair landmark_pair_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"id", "pre", "post", "source"}, where);
    LandmarkPair p;
    p.id = integer(field(j, "id", where), where + "/id");
    p.pre = point_from_json(field(j, "pre", where), where + "/pre");
    p.post = point_from_json(field(j, "post", where), where + "/post");
    if (auto it = j.find("source"); it != j.end()) {
        const auto s = string(*it, where + "/source");
        if (s == "file") p.source = LandmarkSource::file;
        else if (s == "manual") p.source = LandmarkSource::manual;
        else schema_error(where + "/source", "expected \"file\" or \"manual\"");
    }
    return p;
}

inline LandmarkSet landmarks_from_json(const json& doc, const std::string& source = "landmarks") {
    return io_detail::wrap(source, [&] {
        using namespace io_detail;
        check_keys(doc, {"version", "pairs"}, source);
        check_version(doc, source);
        const auto& pairs = array(field(doc, "pairs", source), source + "/pairs");
        LandmarkSet set;
        std::set<std::int64_t> ids;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const auto where = source + "/pairs/" + std::to_string(i);
            auto p = landmark_pair_from_json(pairs[i], where);
            if (!ids.insert(p.id).second) schema_error(where + "/id", "duplicate landmark id " + std::to_string(p.id));
            set.pairs.push_back(p);
        }
        const auto report = validate_landmark_set(set);
        if (!report.valid())
            throw Error(ErrorCode::duplicate, source + ": " + report.violations.front().message);
        return set;
    });
}

inline LandmarkSet read_landmarks(const std::filesystem::path& path) {
    return landmarks_from_json(read_json_file(path), path.string());
}

inline void write_landmarks(const std::filesystem::path& path, const LandmarkSet& set) {
    write_json_file(path, landmarks_to_json(set));
}

// ---------------------------------------------------------------------------------------------
// Kernels, affine, grid

inline json to_json(const KernelSpec& k) {
    return {{"family", std::string(to_string(k.family))}, {"sill", k.sill}, {"param", k.param}, {"nugget", k.nugget}};
}

inline KernelSpec kernel_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"family", "sill", "param", "nugget"}, where);
    KernelSpec k;
    try {
        k.family = parse_kernel_family(string(field(j, "family", where), where + "/family"));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::schema) throw;
        schema_error(where + "/family", e.what());
    }
    k.sill = number(field(j, "sill", where), where + "/sill");
    k.param = number(field(j, "param", where), where + "/param");
    k.nugget = j.contains("nugget") ? number(j["nugget"], where + "/nugget") : 0.0;
    if (!k.is_valid())
        throw Error(ErrorCode::invalid_argument, where + ": kernel invariant violated (sill > 0, param > 0, nugget >= 0)");
    return k;
}

inline json to_json(const AxisKernels& k) { return {{"x", to_json(k[0])}, {"y", to_json(k[1])}, {"z", to_json(k[2])}}; }

// Either {x, y, z} per-axis kernels or a single kernel used on all axes.
inline AxisKernels axis_kernels_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    require_object(j, where);
    if (j.contains("family")) return same_kernel(kernel_from_json(j, where));
    check_keys(j, {"x", "y", "z"}, where);
    return {kernel_from_json(field(j, "x", where), where + "/x"), kernel_from_json(field(j, "y", where), where + "/y"),
            kernel_from_json(field(j, "z", where), where + "/z")};
}

inline json to_json(const AffineTransform& a) {
    const auto v = a.row_major();
    return json(std::vector<double>(v.begin(), v.end()));
}

inline AffineTransform affine_from_json(const json& j, const std::string& where) {
    return AffineTransform::from_row_major(io_detail::number_array<12>(j, where));
}

inline json to_json(const GridSpec& g) {
    return {{"origin_mm", to_json(g.origin)},
            {"spacing_mm", {g.spacing[0], g.spacing[1], g.spacing[2]}},
            {"dims", {g.dims[0], g.dims[1], g.dims[2]}}};
}

inline std::array<std::size_t, 3> dims_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    if (!j.is_array() || j.size() != 3) schema_error(where, "expected an array of 3 positive integers");
    std::array<std::size_t, 3> d{};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto v = unsigned_integer(j[i], where + "/" + std::to_string(i));
        if (v < 1 || v > (1u << 20)) schema_error(where + "/" + std::to_string(i), "dimension out of range");
        d[i] = static_cast<std::size_t>(v);
    }
    return d;
}

inline GridSpec grid_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"origin_mm", "spacing_mm", "dims"}, where);
    GridSpec g;
    g.origin = point_from_json(field(j, "origin_mm", where), where + "/origin_mm");
    g.spacing = number_array<3>(field(j, "spacing_mm", where), where + "/spacing_mm");
    g.dims = dims_from_json(field(j, "dims", where), where + "/dims");
    try {
        g.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::invalid_argument, where + ": " + e.what());
    }
    return g;
}

// ---------------------------------------------------------------------------------------------
// Raster payload + sidecar

struct RasterPaths {
    std::filesystem::path header;
    std::filesystem::path payload;
};

// "<base>.json" + "<base>.raw"
inline RasterPaths raster_paths(const std::filesystem::path& base) {
    return {std::filesystem::path(base.string() + ".json"), std::filesystem::path(base.string() + ".raw")};
}

struct RasterHeader {
    GridSpec grid;
    std::size_t components = 1;

    [[nodiscard]] std::size_t expected_bytes() const { return grid.voxel_count() * components * sizeof(float); }
};

inline json to_json(const RasterHeader& h) {
    return {{"version", format_version},
            {"dims", {h.grid.dims[0], h.grid.dims[1], h.grid.dims[2]}},
            {"spacing_mm", {h.grid.spacing[0], h.grid.spacing[1], h.grid.spacing[2]}},
            {"origin_mm", to_json(h.grid.origin)},
            {"components", h.components},
            {"order", "x-fastest"}};
}

inline RasterHeader raster_header_from_json(const json& j, const std::string& where) {
    return io_detail::wrap(where, [&] {
        using namespace io_detail;
        check_keys(j, {"version", "dims", "spacing_mm", "origin_mm", "components", "order"}, where);
        check_version(j, where, false);
        RasterHeader h;
        h.grid.dims = dims_from_json(field(j, "dims", where), where + "/dims");
        h.grid.spacing = number_array<3>(field(j, "spacing_mm", where), where + "/spacing_mm");
        h.grid.origin = point_from_json(field(j, "origin_mm", where), where + "/origin_mm");
        const auto c = unsigned_integer(field(j, "components", where), where + "/components");
        if (c != 1 && c != 3 && c != 4) schema_error(where + "/components", "expected 1, 3 or 4");
        h.components = static_cast<std::size_t>(c);
        if (auto it = j.find("order"); it != j.end() && string(*it, where + "/order") != "x-fastest")
            schema_error(where + "/order", "only \"x-fastest\" is supported");
        try {
            h.grid.validate();
        } catch (const Error& e) {
            schema_error(where, e.what());
        }
        return h;
    });
}

namespace io_detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

inline std::string encode_float32(const std::vector<float>& values) {
    std::string bytes(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto u = to_little_endian(std::bit_cast<std::uint32_t>(values[i]));
        std::memcpy(bytes.data() + 4 * i, &u, 4);
    }
    return bytes;
}

inline std::vector<float> decode_float32(std::string_view bytes) {
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        std::memcpy(&u, bytes.data() + 4 * i, 4);
        out[i] = std::bit_cast<float>(to_little_endian(u));
    }
    return out;
}

} // namespace io_detail

inline void write_raster(const RasterPaths& paths, const RasterHeader& header, const std::vector<float>& values) {
    if (values.size() * sizeof(float) != header.expected_bytes())
        throw Error(ErrorCode::size_mismatch, "raster value count does not match header");
    write_text_file(paths.payload, io_detail::encode_float32(values));
    write_json_file(paths.header, to_json(header));
}

struct Raster {
    RasterHeader header;
    std::vector<float> values;
};

inline Raster read_raster(const RasterPaths& paths) {
    if (!std::filesystem::exists(paths.header))
        throw Error(ErrorCode::io, "missing raster sidecar header", paths.header.string());
    Raster r;
    r.header = raster_header_from_json(read_json_file(paths.header), paths.header.string());
    const auto bytes = read_text_file(paths.payload);
    if (bytes.size() != r.header.expected_bytes())
        throw Error(ErrorCode::size_mismatch,
                    "raster payload size mismatch: expected " + std::to_string(r.header.expected_bytes()) +
                        " bytes, got " + std::to_string(bytes.size()),
                    paths.payload.string());
    r.values = io_detail::decode_float32(bytes);
    return r;
}

inline void write_volume(const RasterPaths& paths, const Volume& vol) {
    vol.validate();
    write_raster(paths, {vol.grid, 1}, vol.scalars);
}

inline Volume read_volume(const RasterPaths& paths) {
    auto r = read_raster(paths);
    if (r.header.components != 1)
        throw Error(ErrorCode::schema, "volume must have 1 component", paths.header.string());
    Volume v{r.header.grid, std::move(r.values)};
    for (float s : v.scalars)
        if (!std::isfinite(s)) throw Error(ErrorCode::invalid_argument, "volume contains non-finite values");
    return v;
}

inline void write_field(const RasterPaths& paths, const DenseField& field) {
    std::vector<float> values;
    values.reserve(field.vectors.size() * 3);
    for (const auto& v : field.vectors)
        for (std::size_t a = 0; a < 3; ++a) values.push_back(static_cast<float>(v[a]));
    write_raster(paths, {field.grid, 3}, values);
}

inline DenseField read_field(const RasterPaths& paths) {
    auto r = read_raster(paths);
    if (r.header.components != 3)
        throw Error(ErrorCode::schema, "displacement field must have 3 components", paths.header.string());
    DenseField f{r.header.grid, std::vector<Vec3>(r.header.grid.voxel_count())};
    for (std::size_t i = 0; i < f.vectors.size(); ++i)
        f.vectors[i] = {r.values[3 * i], r.values[3 * i + 1], r.values[3 * i + 2]};
    return f;
}

// Components: variance x, y, z, then the trace.
inline void write_uncertainty(const RasterPaths& paths, const UncertaintyMap& map) {
    std::vector<float> values;
    values.reserve(map.variance.size() * 4);
    for (std::size_t i = 0; i < map.variance.size(); ++i) {
        for (std::size_t a = 0; a < 3; ++a) values.push_back(static_cast<float>(map.variance[i][a]));
        values.push_back(static_cast<float>(map.trace[i]));
    }
    write_raster(paths, {map.grid, 4}, values);
}

inline UncertaintyMap read_uncertainty(const RasterPaths& paths) {
    auto r = read_raster(paths);
    if (r.header.components != 4)
        throw Error(ErrorCode::schema, "uncertainty map must have 4 components", paths.header.string());
    const auto n = r.header.grid.voxel_count();
    UncertaintyMap m{r.header.grid, std::vector<std::array<double, 3>>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        m.variance[i] = {r.values[4 * i], r.values[4 * i + 1], r.values[4 * i + 2]};
        m.trace[i] = r.values[4 * i + 3];
    }
    return m;
}

// ---------------------------------------------------------------------------------------------
// Variogram and CV exports

inline json to_json(const VariogramModel& m) {
    return {{"family", std::string(to_string(m.family))}, {"c0", m.nugget},
            {"c", m.partial_sill},  {"a", m.param},
            {"fit_error", m.fit_error}, {"effective_range", effective_range(m)},
            {"no_spatial_correlation", m.no_spatial_correlation}};
}

inline VariogramModel variogram_model_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"family", "c0", "c", "a", "fit_error", "effective_range", "no_spatial_correlation"}, where);
    VariogramModel m;
    m.family = parse_kernel_family(string(field(j, "family", where), where + "/family"));
    m.nugget = number(field(j, "c0", where), where + "/c0");
    m.partial_sill = number(field(j, "c", where), where + "/c");
    m.param = number(field(j, "a", where), where + "/a");
    m.fit_error = number(field(j, "fit_error", where), where + "/fit_error");
    if (j.contains("no_spatial_correlation"))
        m.no_spatial_correlation = boolean(j["no_spatial_correlation"], where + "/no_spatial_correlation");
    if (!(m.nugget >= 0.0 && m.partial_sill > 0.0 && m.param > 0.0))
        throw Error(ErrorCode::invalid_argument, where + ": variogram model invariant violated");
    return m;
}

inline json to_json(const VariogramExport& ex) {
    json bins = json::array();
    for (const auto& b : ex.empirical.bins) bins.push_back({{"h", b.h_mean}, {"gamma", b.gamma_hat}, {"count", b.count}});
    json candidates = json::array();
    for (const auto& c : ex.fit.candidates) candidates.push_back(to_json(c));
    return {{"axis", ex.empirical.axis ? json(std::string(to_string(*ex.empirical.axis))) : json("pooled")},
            {"delta", ex.empirical.delta},
            {"cloud_size", ex.cloud_size},
            {"bins", bins},
            {"model", to_json(ex.fit.best)},
            {"candidates", candidates}};
}

inline VariogramExport variogram_export_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"axis", "delta", "cloud_size", "bins", "model", "candidates"}, where);
    VariogramExport ex;
    const auto axis = string(field(j, "axis", where), where + "/axis");
    if (axis != "pooled") ex.empirical.axis = parse_axis(axis);
    ex.empirical.delta = number(field(j, "delta", where), where + "/delta");
    ex.cloud_size = j.contains("cloud_size") ? unsigned_integer(j["cloud_size"], where + "/cloud_size") : 0;
    const auto& bins = array(field(j, "bins", where), where + "/bins");
    for (std::size_t i = 0; i < bins.size(); ++i) {
        const auto w = where + "/bins/" + std::to_string(i);
        check_keys(bins[i], {"h", "gamma", "count"}, w);
        ex.empirical.bins.push_back({number(field(bins[i], "h", w), w + "/h"),
                                     number(field(bins[i], "gamma", w), w + "/gamma"),
                                     static_cast<std::size_t>(unsigned_integer(field(bins[i], "count", w), w + "/count"))});
    }
    ex.fit.best = variogram_model_from_json(field(j, "model", where), where + "/model");
    if (j.contains("candidates")) {
        const auto& c = array(j["candidates"], where + "/candidates");
        for (std::size_t i = 0; i < c.size(); ++i)
            ex.fit.candidates.push_back(variogram_model_from_json(c[i], where + "/candidates/" + std::to_string(i)));
    }
    return ex;
}

inline json to_json(const VariogramEstimate& est) {
    json exports = json::array();
    for (const auto& e : est.exports) exports.push_back(to_json(e));
    return {{"pooled", est.pooled},
            {"delta", est.lags.delta},
            {"max_lag", est.lags.max_lag},
            {"kernels", to_json(est.kernels)},
            {"variograms", exports}};
}

inline VariogramEstimate variogram_estimate_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"pooled", "delta", "max_lag", "kernels", "variograms"}, where);
    VariogramEstimate est;
    est.pooled = boolean(field(j, "pooled", where), where + "/pooled");
    est.lags.delta = number(field(j, "delta", where), where + "/delta");
    est.lags.max_lag = number(field(j, "max_lag", where), where + "/max_lag");
    est.kernels = axis_kernels_from_json(field(j, "kernels", where), where + "/kernels");
    const auto& v = array(field(j, "variograms", where), where + "/variograms");
    for (std::size_t i = 0; i < v.size(); ++i)
        est.exports.push_back(variogram_export_from_json(v[i], where + "/variograms/" + std::to_string(i)));
    return est;
}

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const CVProtocol& p) {
    return {{"kind", p.kind == CVKind::loo ? "loo" : "kfold"}, {"folds", p.folds}, {"seed", p.seed},
            {"name", p.name()}};
}

inline json to_json(const CVResult& r) {
    json candidates = json::array();
    for (const auto& c : r.candidates) {
        json entry = {{"kernels", to_json(c.kernels)},
                      {"mean_error", nullable(c.mean_error)},
                      {"fold_errors", c.fold_errors},
                      {"failed", c.failed}};
        if (c.failed) entry["failure"] = c.failure;
        candidates.push_back(entry);
    }
    return {{"protocol", to_json(r.protocol)},
            {"selected_index", r.selected_index},
            {"selected", to_json(r.selected)},
            {"candidates", candidates}};
}

inline CVResult cv_result_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"protocol", "selected_index", "selected", "candidates"}, where);
    CVResult r;
    const auto& p = field(j, "protocol", where);
    check_keys(p, {"kind", "folds", "seed", "name"}, where + "/protocol");
    const auto kind = string(field(p, "kind", where + "/protocol"), where + "/protocol/kind");
    if (kind != "loo" && kind != "kfold") schema_error(where + "/protocol/kind", "expected \"loo\" or \"kfold\"");
    r.protocol.kind = kind == "loo" ? CVKind::loo : CVKind::kfold;
    r.protocol.folds = unsigned_integer(field(p, "folds", where + "/protocol"), where + "/protocol/folds");
    r.protocol.seed = unsigned_integer(field(p, "seed", where + "/protocol"), where + "/protocol/seed");
    const auto& cands = array(field(j, "candidates", where), where + "/candidates");
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const auto w = where + "/candidates/" + std::to_string(i);
        const auto& c = cands[i];
        check_keys(c, {"kernels", "mean_error", "fold_errors", "failed", "failure"}, w);
        CandidateResult cr;
        cr.kernels = axis_kernels_from_json(field(c, "kernels", w), w + "/kernels");
        const auto& me = field(c, "mean_error", w);
        cr.mean_error = me.is_null() ? std::numeric_limits<double>::infinity() : number(me, w + "/mean_error");
        for (const auto& fe : array(field(c, "fold_errors", w), w + "/fold_errors"))
            cr.fold_errors.push_back(number(fe, w + "/fold_errors"));
        cr.failed = boolean(field(c, "failed", w), w + "/failed");
        if (c.contains("failure")) cr.failure = string(c["failure"], w + "/failure");
        r.candidates.push_back(std::move(cr));
    }
    r.selected_index = unsigned_integer(field(j, "selected_index", where), where + "/selected_index");
    if (r.selected_index >= r.candidates.size()) schema_error(where + "/selected_index", "index out of range");
    r.selected = axis_kernels_from_json(field(j, "selected", where), where + "/selected");
    return r;
}

// ---------------------------------------------------------------------------------------------
// Kernel grid + project config

inline json to_json(const KernelGridSpec& g) {
    if (!g.candidates.empty()) {
        json c = json::array();
        for (const auto& k : g.candidates) c.push_back(to_json(k));
        return {{"candidates", c}};
    }
    json fams = json::array();
    for (auto f : g.families) fams.push_back(std::string(to_string(f)));
    json out = {{"families", fams}, {"effective_ranges_mm", g.effective_ranges}, {"nuggets_mm2", g.nuggets}};
    if (!g.sills.empty()) out["sills_mm2"] = g.sills;
    return out;
}

inline KernelGridSpec kernel_grid_from_json(const json& j, const std::string& where) {
    using namespace io_detail;
    check_keys(j, {"version", "candidates", "families", "effective_ranges_mm", "nuggets_mm2", "sills_mm2"}, where);
    check_version(j, where, false);
    KernelGridSpec g;
    auto numbers = [&](const char* key, std::vector<double>& out, bool positive) {
        if (!j.contains(key)) return;
        out.clear();
        const auto w = where + "/" + key;
        for (const auto& v : array(j[key], w)) {
            const double x = number(v, w);
            if (positive ? !(x > 0.0) : !(x >= 0.0)) schema_error(w, "value out of range");
            out.push_back(x);
        }
    };
    if (j.contains("candidates")) {
        const auto& c = array(j["candidates"], where + "/candidates");
        if (c.empty()) schema_error(where + "/candidates", "grid must not be empty");
        for (std::size_t i = 0; i < c.size(); ++i)
            g.candidates.push_back(kernel_from_json(c[i], where + "/candidates/" + std::to_string(i)));
        return g;
    }
    if (j.contains("families")) {
        g.families.clear();
        for (const auto& f : array(j["families"], where + "/families"))
            g.families.push_back(parse_kernel_family(string(f, where + "/families")));
    }
    numbers("effective_ranges_mm", g.effective_ranges, true);
    numbers("nuggets_mm2", g.nuggets, false);
    numbers("sills_mm2", g.sills, true);
    if (g.families.empty() || g.effective_ranges.empty() || g.nuggets.empty())
        schema_error(where, "grid must not be empty");
    return g;
}

struct ProjectConfig {
    std::optional<GridSpec> grid; // default: landmark bounding box, 1 mm isotropic
    KernelEstimationSettings kernels;
    std::vector<MethodKind> methods{all_methods.begin(), all_methods.end()};
    bool freeze_affine = false;
};

inline json to_json(const ProjectConfig& c) {
    json methods = json::array();
    for (auto m : c.methods) methods.push_back(std::string(to_string(m)));
    json vg = {{"delta_mm", c.kernels.variogram.delta ? json(*c.kernels.variogram.delta) : json(nullptr)},
               {"min_landmarks", c.kernels.variogram.min_landmarks},
               {"pooled", c.kernels.variogram.pooled}};
    json fams = json::array();
    for (auto f : c.kernels.variogram.families) fams.push_back(std::string(to_string(f)));
    vg["families"] = fams;
    json out = {{"version", format_version},
                {"kernel_mode", std::string(to_string(c.kernels.mode))},
                {"kernel_grid", to_json(c.kernels.grid)},
                {"variogram", vg},
                {"cv_seed", c.kernels.cv_seed},
                {"methods", methods},
                {"freeze_affine", c.freeze_affine},
                {"threads", c.kernels.threads}};
    if (c.grid) out["grid"] = to_json(*c.grid);
    if (c.kernels.manual) out["manual_kernels"] = to_json(*c.kernels.manual);
    return out;
}

inline ProjectConfig config_from_json(const json& j, const std::string& where = "config") {
    return io_detail::wrap(where, [&] {
        using namespace io_detail;
        check_keys(j, {"version", "grid", "kernel_mode", "manual_kernels", "kernel_grid", "variogram", "cv_seed",
                       "methods", "freeze_affine", "threads"},
                   where);
        check_version(j, where, false);
        ProjectConfig c;
        if (j.contains("grid")) c.grid = grid_from_json(j["grid"], where + "/grid");
        if (j.contains("kernel_mode"))
            c.kernels.mode = parse_kernel_mode(string(j["kernel_mode"], where + "/kernel_mode"));
        if (j.contains("manual_kernels"))
            c.kernels.manual = axis_kernels_from_json(j["manual_kernels"], where + "/manual_kernels");
        if (c.kernels.mode == KernelMode::manual && !c.kernels.manual)
            schema_error(where, "kernel_mode \"manual\" requires manual_kernels");
        if (j.contains("kernel_grid")) c.kernels.grid = kernel_grid_from_json(j["kernel_grid"], where + "/kernel_grid");
        if (j.contains("variogram")) {
            const auto& v = j["variogram"];
            const auto w = where + "/variogram";
            check_keys(v, {"delta_mm", "min_landmarks", "pooled", "families"}, w);
            if (v.contains("delta_mm") && !v["delta_mm"].is_null()) {
                const double d = number(v["delta_mm"], w + "/delta_mm");
                if (!(d > 0.0)) schema_error(w + "/delta_mm", "must be positive");
                c.kernels.variogram.delta = d;
            }
            if (v.contains("min_landmarks"))
                c.kernels.variogram.min_landmarks = unsigned_integer(v["min_landmarks"], w + "/min_landmarks");
            if (v.contains("pooled")) c.kernels.variogram.pooled = boolean(v["pooled"], w + "/pooled");
            if (v.contains("families")) {
                c.kernels.variogram.families.clear();
                for (const auto& f : array(v["families"], w + "/families"))
                    c.kernels.variogram.families.push_back(parse_kernel_family(string(f, w + "/families")));
                if (c.kernels.variogram.families.empty()) schema_error(w + "/families", "must not be empty");
            }
        }
        if (j.contains("cv_seed")) c.kernels.cv_seed = unsigned_integer(j["cv_seed"], where + "/cv_seed");
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : array(j["methods"], where + "/methods"))
                c.methods.push_back(parse_method(string(m, where + "/methods")));
        }
        if (j.contains("freeze_affine")) c.freeze_affine = boolean(j["freeze_affine"], where + "/freeze_affine");
        if (j.contains("threads"))
            c.kernels.threads = static_cast<unsigned>(unsigned_integer(j["threads"], where + "/threads"));
        return c;
    });
}

inline ProjectConfig read_config(const std::filesystem::path& path) {
    return config_from_json(read_json_file(path), path.string());
}

// Bounding box of the pre-points, padded by 10% (at least 5 mm), sampled at `spacing`.
inline GridSpec default_grid_for(const LandmarkSet& set, double spacing = 1.0) {
    GridSpec g;
    g.spacing = {spacing, spacing, spacing};
    if (set.empty()) return g;
    Point3 lo = set.pairs.front().pre, hi = lo;
    for (const auto& p : set.pairs)
        for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p.pre[a]);
            hi[a] = std::max(hi[a], p.pre[a]);
        }
    for (std::size_t a = 0; a < 3; ++a) {
        const double pad = std::max(5.0, 0.1 * (hi[a] - lo[a]));
        const double start = std::floor((lo[a] - pad) / spacing) * spacing;
        const double stop = std::ceil((hi[a] + pad) / spacing) * spacing;
        g.origin[a] = start;
        g.dims[a] = static_cast<std::size_t>(std::llround((stop - start) / spacing)) + 1;
    }
    return g;
}

// ---------------------------------------------------------------------------------------------
// Model bundle

struct ModelBundle {
    AffineTransform affine;
    bool affine_available = false;
    AxisKernels kernels;
    KernelProvenance provenance = KernelProvenance::fallback;
    double mean_const = 0.0;
    LandmarkSet landmarks;
    std::optional<GridSpec> grid;
    std::optional<VariogramEstimate> variogram; // absent for grid-search or manual runs
    std::optional<CVResult> cv;
    std::uint64_t seed = default_cv_seed;
    std::uint64_t revision = 0;
};

inline json to_json(const ModelBundle& b) {
    json out = {{"version", format_version},
                {"affine", to_json(b.affine)},
                {"affine_available", b.affine_available},
                {"kernels", to_json(b.kernels)},
                {"provenance", std::string(to_string(b.provenance))},
                {"mean_const", b.mean_const},
                {"landmarks", landmarks_to_json(b.landmarks)},
                {"grid", b.grid ? to_json(*b.grid) : json(nullptr)},
                {"variogram", b.variogram ? to_json(*b.variogram) : json(nullptr)},
                {"cv_result", b.cv ? to_json(*b.cv) : json(nullptr)},
                {"seed", b.seed},
                {"revision", b.revision}};
    return out;
}

inline ModelBundle bundle_from_json(const json& j, const std::string& where = "bundle") {
    return io_detail::wrap(where, [&] {
        using namespace io_detail;
        check_keys(j, {"version", "affine", "affine_available", "kernels", "provenance", "mean_const", "landmarks",
                       "grid", "variogram", "cv_result", "seed", "revision"},
                   where);
        check_version(j, where);
        ModelBundle b;
        b.affine = affine_from_json(field(j, "affine", where), where + "/affine");
        b.affine_available = boolean(field(j, "affine_available", where), where + "/affine_available");
        b.kernels = axis_kernels_from_json(field(j, "kernels", where), where + "/kernels");
        b.provenance = parse_kernel_provenance(string(field(j, "provenance", where), where + "/provenance"));
        b.mean_const = j.contains("mean_const") ? number(j["mean_const"], where + "/mean_const") : 0.0;
        b.landmarks = landmarks_from_json(field(j, "landmarks", where), where + "/landmarks");
        if (j.contains("grid") && !j["grid"].is_null()) b.grid = grid_from_json(j["grid"], where + "/grid");
        if (j.contains("variogram") && !j["variogram"].is_null())
            b.variogram = variogram_estimate_from_json(j["variogram"], where + "/variogram");
        if (j.contains("cv_result") && !j["cv_result"].is_null())
            b.cv = cv_result_from_json(j["cv_result"], where + "/cv_result");
        if (j.contains("seed")) b.seed = unsigned_integer(j["seed"], where + "/seed");
        if (j.contains("revision")) b.revision = unsigned_integer(j["revision"], where + "/revision");
        if (b.affine_available && !b.affine.is_invertible())
            throw Error(ErrorCode::invalid_argument, where + "/affine: transform is not invertible");
        return b;
    });
}

inline void write_model_bundle(const std::filesystem::path& path, const ModelBundle& b) {
    write_json_file(path, to_json(b));
}

inline ModelBundle read_model_bundle(const std::filesystem::path& path) {
    return bundle_from_json(read_json_file(path), path.string());
}

// Rebuilds the fitted registration from a bundle; the stored affine is used as-is.
inline Registration registration_from_bundle(const ModelBundle& b) {
    Registration r;
    r.landmarks = b.landmarks;
    r.affine = b.affine;
    r.affine_available = b.affine_available;
    r.observations = compute_displacements(b.landmarks, b.affine);
    r.kernels = b.kernels;
    r.provenance = b.provenance;
    for (std::size_t a = 0; a < 3; ++a)
        r.models[a] = fit_gp_axis(b.kernels[a], r.observations, static_cast<Axis>(a), b.mean_const);
    return r;
}

// ---------------------------------------------------------------------------------------------
// Evaluation cases: training landmarks plus disjoint held-out landmarks with known post positions.

struct EvaluationCase {
    std::string name;
    std::uint64_t seed = 0;
    LandmarkSet training;
    LandmarkSet evaluation;
};

inline json to_json(const EvaluationCase& c) {
    return {{"version", format_version},
            {"name", c.name},
            {"seed", c.seed},
            {"training", landmarks_to_json(c.training)},
            {"evaluation", landmarks_to_json(c.evaluation)}};
}

inline EvaluationCase evaluation_case_from_json(const json& j, const std::string& where = "case") {
    return io_detail::wrap(where, [&] {
        using namespace io_detail;
        check_keys(j, {"version", "name", "seed", "training", "evaluation"}, where);
        check_version(j, where);
        EvaluationCase c;
        c.name = j.contains("name") ? string(j["name"], where + "/name") : std::string{};
        c.seed = j.contains("seed") ? unsigned_integer(j["seed"], where + "/seed") : 0;
        c.training = landmarks_from_json(field(j, "training", where), where + "/training");
        c.evaluation = landmarks_from_json(field(j, "evaluation", where), where + "/evaluation");
        for (const auto& e : c.evaluation.pairs)
            if (c.training.find(e.id))
                schema_error(where + "/evaluation", "landmark id " + std::to_string(e.id) + " also used for training");
        return c;
    });
}

inline void write_evaluation_case(const std::filesystem::path& path, const EvaluationCase& c) {
    write_json_file(path, to_json(c));
}

inline EvaluationCase read_evaluation_case(const std::filesystem::path& path) {
    return evaluation_case_from_json(read_json_file(path), path.string());
}

} // namespace gpreg
