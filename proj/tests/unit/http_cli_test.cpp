// Library headers must precede httplib: resolv.h defines a `_res` macro that breaks Eigen.
#include "gpreg/eval.hpp"
#include "gpreg/http_service.hpp"
#include "gpreg/io.hpp"
#include "gpreg/version.hpp"
#include "test_util.hpp"

#include <cstdio>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <sys/wait.h>

using namespace gpreg;
using nlohmann::json;
using testutil::TempDir;

namespace {

LandmarkSet random_landmarks(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    LandmarkSet s;
    for (std::size_t i = 0; i < n; ++i) {
        const Point3 p{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 100)};
        s.pairs.push_back({static_cast<std::int64_t>(i + 1), p, p + Vec3{rng.normal(), rng.normal(), rng.normal()},
                           LandmarkSource::file});
    }
    return s;
}

json small_config() {
    return {{"grid", {{"origin_mm", {0, 0, 0}}, {"spacing_mm", {10, 10, 10}}, {"dims", {11, 11, 11}}}}};
}

class LiveServer {
public:
    explicit LiveServer(std::filesystem::path data_dir) : service_(std::move(data_dir)) {
        port_ = service_.bind("127.0.0.1", 0);
        thread_ = std::thread([this] { service_.listen_after_bind(); });
        service_.wait_until_ready();
    }
    ~LiveServer() {
        service_.stop();
        thread_.join();
    }
    [[nodiscard]] int port() const { return port_; }
    [[nodiscard]] httplib::Client client() const {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(120);
        return c;
    }
    HttpService& service() { return service_; }

private:
    HttpService service_;
    int port_ = -1;
    std::thread thread_;
};

struct CommandResult {
    int exit_code = -1;
    std::string output; // stdout and stderr interleaved
};

CommandResult run_shell(const std::string& cmd) {
    CommandResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
    const int status = ::pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

CommandResult run_cli(const std::string& args) { return run_shell(std::string(GPREG_CLI_PATH) + " " + args + " 2>&1"); }

json post_json(httplib::Client& c, const std::string& path, const json& body, int expected) {
    auto res = c.Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expected) << path << ": " << res->body;
    return json::parse(res->body);
}

} // namespace

TEST(Http, StatusMapping) {
    EXPECT_EQ(http_status_for(ErrorCode::not_found), 404);
    EXPECT_EQ(http_status_for(ErrorCode::duplicate), 409);
    EXPECT_EQ(http_status_for(ErrorCode::unavailable), 422);
    EXPECT_EQ(http_status_for(ErrorCode::schema), 400);
    EXPECT_EQ(http_status_for(ErrorCode::out_of_range), 400);
}

TEST(Http, HealthReportsVersion) {
    LiveServer server({});
    auto c = server.client();
    auto res = c.Get("/health");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const auto j = json::parse(res->body);
    EXPECT_EQ(j["status"], "ok");
    EXPECT_EQ(j["version"], std::string(version));
}

TEST(Http, SessionRoundTrip) {
    TempDir dir;
    LiveServer server(dir.path());
    auto c = server.client();

    const auto created = post_json(c, "/sessions", {{"landmarks", landmarks_to_json(random_landmarks(1, 12))}, {"config", small_config()}}, 201);
    const auto id = created["id"].get<std::string>();
    EXPECT_EQ(id, "s1");
    EXPECT_EQ(created["summary"]["protocol"], "loo");
    EXPECT_EQ(created["summary"]["landmark_count"], 12);

    const auto added = post_json(c, "/sessions/" + id + "/landmarks", {{"pre", {50, 50, 50}}, {"post", {51, 50, 49}}}, 201);
    EXPECT_EQ(added["revision"], 1);
    EXPECT_EQ(added["id"], 13);
    EXPECT_LE(added["variance_after"]["trace"].get<double>(), added["variance_before"]["trace"].get<double>());

    auto state = c.Get("/sessions/" + id + "/state");
    ASSERT_TRUE(state);
    EXPECT_EQ(state->status, 200);
    const auto sj = json::parse(state->body);
    EXPECT_EQ(sj["landmarks"].size(), 13u);
    EXPECT_EQ(sj["landmarks"][12]["source"], "manual");

    // JSON slice with base64 payload.
    auto js = c.Get("/sessions/" + id + "/slices?kind=uncertainty&axis=z&index=5");
    ASSERT_TRUE(js);
    ASSERT_EQ(js->status, 200) << js->body;
    const auto meta = json::parse(js->body);
    EXPECT_EQ(meta["dims"], json::array({11, 11}));
    EXPECT_EQ(meta["encoding"], "base64");
    EXPECT_EQ(meta["revision"], 1);

    // Binary slice with the metadata in a header; payload must match the base64 body.
    auto bin = c.Get("/sessions/" + id + "/slices?kind=uncertainty&axis=z&index=5",
                     httplib::Headers{{"Accept", "application/octet-stream"}});
    ASSERT_TRUE(bin);
    ASSERT_EQ(bin->status, 200);
    EXPECT_EQ(bin->get_header_value("Content-Type"), "application/octet-stream");
    EXPECT_EQ(bin->body.size(), 11u * 11u * 4u);
    EXPECT_EQ(httplib::detail::base64_encode(bin->body), meta["data"].get<std::string>());
    EXPECT_EQ(json::parse(bin->get_header_value("X-Slice-Metadata"))["kind"], "uncertainty");

    const auto kernel = post_json(c, "/sessions/" + id + "/kernel",
                                  {{"mode", "manual"}, {"kernels", {{"family", "exponential"}, {"sill", 2}, {"param", 10}, {"nugget", 0.1}}}}, 200);
    EXPECT_EQ(kernel["revision"], 2);
    EXPECT_EQ(kernel["summary"]["provenance"], "manual");
    EXPECT_EQ(kernel["summary"]["kernels"]["y"]["family"], "exponential");

    auto del = c.Delete("/sessions/" + id + "/landmarks/13");
    ASSERT_TRUE(del);
    EXPECT_EQ(del->status, 200);
    EXPECT_EQ(json::parse(del->body)["revision"], 3);

    const auto exported = post_json(c, "/sessions/" + id + "/export", json::object(), 200);
    EXPECT_EQ(exported["revision"], 3);
    const std::filesystem::path bundle = exported["bundle"].get<std::string>();
    EXPECT_EQ(bundle, dir.path() / "exports" / "s1" / "rev-3" / "bundle.json");
    EXPECT_EQ(read_model_bundle(bundle).landmarks.size(), 12u);

    server.service().flush();
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "sessions" / "s1" / "landmarks.json"));
}

TEST(Http, ErrorResponses) {
    LiveServer server({});
    auto c = server.client();
    auto expect_error = [](const httplib::Result& res, int status, const std::string& code) {
        ASSERT_TRUE(res);
        EXPECT_EQ(res->status, status) << res->body;
        const auto j = json::parse(res->body);
        EXPECT_EQ(j["code"], code) << res->body;
        EXPECT_FALSE(j["message"].get<std::string>().empty());
    };
    expect_error(c.Get("/sessions/nope/state"), 404, "not_found");
    expect_error(c.Post("/sessions", "{not json", "application/json"), 400, "schema");
    expect_error(c.Post("/sessions", R"({"landmarks":{"version":1,"pairs":[]}})", "application/json"), 400,
                 "insufficient_data");

    const auto created = post_json(c, "/sessions", {{"landmarks", landmarks_to_json(random_landmarks(2, 8))}, {"config", small_config()}}, 201);
    const auto base = "/sessions/" + created["id"].get<std::string>();
    const auto first = random_landmarks(2, 8).pairs.front();
    expect_error(c.Post(base + "/landmarks", json{{"pre", to_json(first.pre)}, {"post", to_json(first.post)}}.dump(), "application/json"),
                 409, "duplicate");
    expect_error(c.Delete(base + "/landmarks/99"), 404, "not_found");
    expect_error(c.Get(base + "/slices?kind=uncertainty&axis=z&index=11"), 400, "out_of_range");
    expect_error(c.Get(base + "/slices?kind=pre_volume&axis=z&index=0"), 422, "unavailable");
    expect_error(c.Get(base + "/slices?kind=bogus&axis=z&index=0"), 400, "invalid_argument");
    expect_error(c.Post(base + "/kernel", R"({"mode":"variogram"})", "application/json"), 422, "unavailable");
    expect_error(c.Post(base + "/export", "{}", "application/json"), 400, "invalid_argument");
}

TEST(Http, CreatesFromPathsAndVolumes) {
    TempDir dir;
    write_landmarks(dir / "lm.json", random_landmarks(3, 10));
    write_json_file(dir / "cfg.json", small_config());
    const GridSpec g{{0, 0, 0}, {10, 10, 10}, {11, 11, 11}};
    write_volume(raster_paths(dir / "pre"), Volume{g, std::vector<float>(g.voxel_count(), 1.0f)});
    LiveServer server({});
    auto c = server.client();
    const auto created = post_json(c, "/sessions",
                                   {{"landmarks_path", (dir / "lm.json").string()},
                                    {"config_path", (dir / "cfg.json").string()},
                                    {"volumes", {{"pre", (dir / "pre").string()}}}},
                                   201);
    auto res = c.Get("/sessions/" + created["id"].get<std::string>() + "/slices?kind=pre_volume&axis=x&index=0");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    auto missing = c.Post("/sessions", json{{"landmarks_path", (dir / "absent.json").string()}}.dump(), "application/json");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 500);
    EXPECT_NE(missing->body.find("absent.json"), std::string::npos);
}

TEST(Cli, VersionAndUsageErrors) {
    auto r = run_cli("--version");
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NE(r.output.find(std::string(version)), std::string::npos);
    EXPECT_EQ(run_cli("").exit_code, 2);
    EXPECT_EQ(run_cli("register --landmarks x.json").exit_code, 2); // --out-dir missing
    EXPECT_EQ(run_cli("frobnicate").exit_code, 2);
}

TEST(Cli, MissingInputNamesThePath) {
    TempDir dir;
    const auto r = run_cli("register --landmarks /no/such/landmarks.json --out-dir " + (dir / "out").string());
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("/no/such/landmarks.json"), std::string::npos) << r.output;
}

TEST(Cli, MalformedInputIsReported) {
    TempDir dir;
    write_text_file(dir / "bad.json", "{\"version\": 1,\n \"pairs\": [}\n");
    const auto r = run_cli("gridsearch --landmarks " + (dir / "bad.json").string() + " --out " + (dir / "o.json").string());
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("line 2"), std::string::npos) << r.output;
}

TEST(Cli, GridSearchProtocolFollowsLandmarkCount) {
    TempDir dir;
    write_landmarks(dir / "big.json", random_landmarks(4, 123));
    write_landmarks(dir / "small.json", random_landmarks(5, 12));
    auto r = run_cli("gridsearch --landmarks " + (dir / "big.json").string() + " --out " + (dir / "big-cv.json").string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("protocol: 5-fold"), std::string::npos) << r.output;
    const auto cv = read_json_file(dir / "big-cv.json");
    EXPECT_EQ(cv["protocol"]["folds"], 5);
    r = run_cli("gridsearch --landmarks " + (dir / "small.json").string() + " --out " + (dir / "small-cv.json").string());
    EXPECT_NE(r.output.find("protocol: loo"), std::string::npos) << r.output;
}

TEST(Cli, RegisterWritesOutputs) {
    TempDir dir;
    write_landmarks(dir / "lm.json", random_landmarks(6, 20));
    write_json_file(dir / "cfg.json", small_config());
    const auto r = run_cli("register --landmarks " + (dir / "lm.json").string() + " --config " +
                           (dir / "cfg.json").string() + " --out-dir " + (dir / "out").string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    for (const auto* f : {"bundle.json", "field.json", "field.raw", "uncertainty.json", "uncertainty.raw", "summary.json"})
        EXPECT_TRUE(std::filesystem::exists(dir / "out" / f)) << f;
    EXPECT_EQ(std::filesystem::file_size(dir / "out" / "field.raw"), 11u * 11u * 11u * 3u * 4u);
    EXPECT_NE(r.output.find("protocol: loo"), std::string::npos) << r.output;
}

TEST(Cli, VariogramFromBins) {
    TempDir dir;
    json bins = json::array();
    for (int b = 0; b < 12; ++b) {
        const double h = 2.5 + 5.0 * b;
        bins.push_back({{"h", h}, {"gamma", 0.1 + 1.0 * (1.0 - std::exp(-h * h / 100.0))}, {"count", 30}});
    }
    write_json_file(dir / "bins.json", {{"bins", bins}});
    const auto r = run_cli("variogram --bins " + (dir / "bins.json").string() + " --out " + (dir / "vg.json").string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const auto vg = read_json_file(dir / "vg.json");
    const auto& model = vg["variograms"][0]["model"];
    EXPECT_EQ(model["family"], "gaussian");
    EXPECT_NEAR(model["a"].get<double>(), 100.0, 1e-2);
}

TEST(Cli, ServeStopsCleanlyOnSignal) {
    TempDir dir;
    // Background jobs of a non-interactive shell ignore SIGINT, so this exercises SIGTERM.
    const auto r = run_shell("(" + std::string(GPREG_CLI_PATH) + " serve --bind 127.0.0.1:0 --data-dir " +
                             dir.path().string() + " & pid=$!; sleep 1; kill -TERM $pid; wait $pid) 2>&1");
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("listening on http://127.0.0.1:"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("stopped"), std::string::npos) << r.output;
}

TEST(Cli, ServeReportsBindConflict) {
    LiveServer server({});
    const auto r = run_cli("serve --bind 127.0.0.1:" + std::to_string(server.port()));
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("cannot bind"), std::string::npos) << r.output;
}

TEST(Cli, HelpTextsMatchSnapshots) {
    for (const std::string sub : {"", "register", "variogram", "gridsearch", "evaluate", "synth", "serve"}) {
        const auto r = run_cli(sub.empty() ? "--help" : sub + " --help");
        EXPECT_EQ(r.exit_code, 0);
        const auto name = std::string(GPREG_SNAPSHOT_DIR) + "/help-" + (sub.empty() ? "main" : sub) + ".txt";
        std::ifstream in(name);
        ASSERT_TRUE(in) << "missing snapshot " << name;
        const std::string expected{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        EXPECT_EQ(r.output, expected) << sub;
    }
}
