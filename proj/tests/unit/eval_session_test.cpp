#include <cmath>

#include <gtest/gtest.h>

#include "gpreg/eval.hpp"
#include "gpreg/io.hpp"
#include "gpreg/session.hpp"
#include "test_util.hpp"

using namespace gpreg;
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

SessionInputs small_inputs(std::size_t n, std::uint64_t seed = 1) {
    SessionInputs in;
    in.landmarks = random_landmarks(seed, n);
    in.config.grid = GridSpec{{0, 0, 0}, {100.0 / 7.0, 100.0 / 7.0, 100.0 / 7.0}, {8, 8, 8}};
    return in;
}

AxisKernels manual_kernels(double sill = 2.0, double range = 30.0, double nugget = 0.05) {
    return same_kernel(KernelSpec::from_effective_range(KernelFamily::gaussian, sill, range, nugget));
}

MethodResult ok_result(MethodKind m, double mean, double std) {
    MethodResult r;
    r.method = m;
    r.mean_error = mean;
    r.std_error = std;
    return r;
}

} // namespace

TEST(Eval, MeanEuclideanError) {
    const std::vector<Point3> p{{0, 0, 0}, {1, 1, 1}};
    const std::vector<Point3> t{{3, 4, 0}, {1, 1, 1}};
    const auto s = mean_euclidean_error(p, t);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_DOUBLE_EQ(s.std, 2.5);
    EXPECT_DOUBLE_EQ(mean_euclidean_error(std::vector<Point3>{{0, 0, 0}}, std::vector<Point3>{{3, 4, 0}}).mean, 5.0);
    EXPECT_THROW(mean_euclidean_error(p, std::vector<Point3>{{0, 0, 0}}), Error);
    EXPECT_THROW(mean_euclidean_error(std::vector<Point3>{}, std::vector<Point3>{}), Error);
}

TEST(Report, HeaderOnlyWhenEmpty) {
    const auto text = render_report(std::vector<CaseResult>{});
    EXPECT_EQ(text,
              "Case | Landmarks | Before Reg. | Affine | Thin-plate | Variograms | GaussianK\n"
              "-----+-----------+-------------+--------+------------+------------+----------\n");
}

TEST(Report, CellsAndUnavailableMethods) {
    CaseResult c;
    c.name = "Patient 5";
    c.training_landmarks = 64;
    c.methods.push_back(ok_result(MethodKind::before, 3.354, 1.2249));
    c.methods.push_back(ok_result(MethodKind::affine, 2.0, 0.5));
    MethodResult na;
    na.method = MethodKind::variogram_gp;
    na.status = MethodStatus::not_available;
    na.reason = "below landmark threshold";
    c.methods.push_back(na);
    const auto row = report_row(c);
    EXPECT_EQ(row[1], "64");
    EXPECT_EQ(row[2], "3.35±1.22");
    EXPECT_EQ(row[3], "2.00±0.50");
    EXPECT_EQ(row[4], "n/a"); // not run at all
    EXPECT_EQ(row[5], "n/a");
    const auto text = render_report(std::vector<CaseResult>{c});
    EXPECT_NE(text.find("Patient 5 | 64        | 3.35±1.22"), std::string::npos) << text;
    const auto j = report_to_json(std::vector<CaseResult>{c});
    EXPECT_EQ(j["cases"][0]["methods"][2]["status"], "n/a");
    EXPECT_EQ(j["cases"][0]["methods"][2]["reason"], "below landmark threshold");
}

TEST(Eval, PureAffineCaseIsRecoveredExactly) {
    SyntheticSpec spec;
    spec.seed = 9;
    spec.landmarks = 40;
    spec.field_kernel.reset();
    const auto c = generate_synthetic_case(spec);
    const auto r = run_protocol(to_evaluation_case(c));
    EXPECT_GT(r.find(MethodKind::before)->mean_error, 0.1);
    for (const auto m : {MethodKind::affine, MethodKind::thin_plate, MethodKind::grid_search_gp}) {
        ASSERT_TRUE(r.find(m)->ok()) << to_string(m) << ": " << r.find(m)->reason;
        EXPECT_LT(r.find(m)->mean_error, 1e-8) << to_string(m);
    }
    // 28 training landmarks: the variogram method is below its threshold.
    EXPECT_FALSE(r.find(MethodKind::variogram_gp)->ok());
    EXPECT_NE(r.find(MethodKind::variogram_gp)->reason.find("below landmark threshold"), std::string::npos);
}

TEST(Eval, ProtocolIsDeterministic) {
    SyntheticSpec spec;
    spec.seed = 10;
    spec.landmarks = 90;
    const auto c = to_evaluation_case(generate_synthetic_case(spec));
    const auto a = run_protocol(c);
    const auto b = run_protocol(c);
    ASSERT_EQ(a.methods.size(), b.methods.size());
    for (std::size_t i = 0; i < a.methods.size(); ++i) {
        EXPECT_EQ(a.methods[i].status, b.methods[i].status);
        EXPECT_EQ(a.methods[i].errors, b.methods[i].errors);
    }
    EXPECT_EQ(a.protocol, "5-fold");
    EXPECT_EQ(a.training_landmarks, 63u);
}

TEST(Eval, RunCasesMatchesSequentialRuns) {
    std::vector<EvaluationCase> cases;
    for (std::uint64_t s = 1; s <= 3; ++s) {
        SyntheticSpec spec;
        spec.seed = s;
        spec.landmarks = 30;
        cases.push_back(to_evaluation_case(generate_synthetic_case(spec)));
    }
    ProtocolSettings settings;
    settings.kernels.threads = 1;
    const auto parallel = run_cases(cases, settings, 3);
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto seq = run_protocol(cases[i], settings);
        for (std::size_t m = 0; m < seq.methods.size(); ++m)
            EXPECT_EQ(parallel[i].methods[m].errors, seq.methods[m].errors);
    }
}

TEST(Eval, BudgetMarksRemainingMethods) {
    SyntheticSpec spec;
    spec.landmarks = 20;
    ProtocolSettings settings;
    settings.budget_seconds = -1.0;
    const auto r = run_protocol(to_evaluation_case(generate_synthetic_case(spec)), settings);
    EXPECT_TRUE(r.over_budget);
    for (const auto& m : r.methods) EXPECT_EQ(m.reason, "case time budget exceeded");
}

TEST(Synthetic, SplitAndIdsAreConsistent) {
    SyntheticSpec spec;
    spec.seed = 4;
    spec.landmarks = 50;
    const auto c = generate_synthetic_case(spec);
    EXPECT_EQ(c.training.size() + c.evaluation.size(), 50u);
    EXPECT_EQ(c.evaluation.size(), 15u);
    for (const auto& e : c.evaluation.pairs) EXPECT_EQ(c.training.find(e.id), nullptr);
    for (const auto* set : {&c.training, &c.evaluation})
        for (const auto& p : set->pairs) {
            const auto i = static_cast<std::size_t>(p.id - 1);
            EXPECT_EQ(p.pre, c.locations[i]);
            EXPECT_LT(distance(p.post, apply_affine(c.affine, c.locations[i] + c.displacements[i])), 1e-12);
        }
    const auto again = generate_synthetic_case(spec);
    EXPECT_EQ(again.training, c.training);
}

TEST(Synthetic, MarginalVarianceMatchesKernel) {
    // d_a(x) has variance sill + nugget at every point; check the second moment at one
    // location across 20 seeds and 3 axes against a 3 standard-error band.
    const auto k = KernelSpec::from_effective_range(KernelFamily::gaussian, 4.0, 50.0, 0.01);
    double sum_sq = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
        SyntheticSpec spec;
        spec.seed = seed;
        spec.landmarks = 30;
        spec.field_kernel = k;
        const auto c = generate_synthetic_case(spec);
        for (std::size_t a = 0; a < 3; ++a) {
            sum_sq += c.displacements[0][a] * c.displacements[0][a];
            ++count;
        }
    }
    const double expected = k.sill + k.nugget;
    const double se = std::sqrt(2.0) * expected / std::sqrt(static_cast<double>(count));
    EXPECT_NEAR(sum_sq / static_cast<double>(count), expected, 3.0 * se);
}

TEST(Synthetic, TooManyLandmarksForExactSampling) {
    SyntheticSpec spec;
    spec.landmarks = max_exact_sample_size + 1;
    EXPECT_THROW(generate_synthetic_case(spec), Error);
}

TEST(Slices, OrientationAndRange) {
    const GridSpec g{{0, 0, 0}, {1, 2, 3}, {4, 3, 2}};
    std::vector<float> values(g.voxel_count());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(i);
    const auto z = cut_slice(g, values, Axis::z, 1);
    EXPECT_EQ(z.width, 4u);
    EXPECT_EQ(z.height, 3u);
    EXPECT_EQ(z.values[2 * 4 + 3], values[g.index(3, 2, 1)]);
    const auto x = cut_slice(g, values, Axis::x, 2);
    EXPECT_EQ(x.width, 3u);
    EXPECT_EQ(x.height, 2u);
    EXPECT_EQ(x.values[1 * 3 + 2], values[g.index(2, 2, 1)]);
    const auto y = cut_slice(g, values, Axis::y, 0);
    EXPECT_EQ(y.values[1 * 4 + 3], values[g.index(3, 0, 1)]);
    const auto meta = slice_metadata(z);
    EXPECT_EQ(meta["spacing_mm"], nlohmann::json::array({1.0, 2.0}));
    EXPECT_EQ(meta["origin_mm"], nlohmann::json::array({0.0, 0.0, 3.0}));
    try {
        cut_slice(g, values, Axis::z, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::out_of_range);
    }
}

TEST(Session, RejectsEmptyLandmarks) {
    SessionInputs in;
    try {
        Session s("s", in);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::insufficient_data);
    }
}

TEST(Session, SmallSetUsesLeaveOneOut) {
    Session s("s", small_inputs(12));
    const auto sum = s.summary();
    EXPECT_EQ(sum["protocol"], "loo");
    EXPECT_EQ(sum["provenance"], "grid");
    EXPECT_EQ(sum["revision"], 0);
    EXPECT_EQ(sum["methods"]["variogram_gp"]["available"], false);
    EXPECT_NE(sum["methods"]["variogram_gp"]["reason"].get<std::string>().find("below landmark threshold"),
              std::string::npos);
    const auto st = s.state_json();
    EXPECT_EQ(st["landmarks"].size(), 12u);
    EXPECT_EQ(st["cv_result"]["protocol"]["kind"], "loo");
}

TEST(Session, AddThenRemoveRestoresField) {
    auto in = small_inputs(15, 2);
    in.config.kernels.mode = KernelMode::manual;
    in.config.kernels.manual = manual_kernels();
    Session s("s", in);
    const auto before = s.snapshot();
    const auto r = s.add_landmark_pair({50, 50, 50}, {52, 49, 51});
    EXPECT_EQ(s.snapshot()->revision, 1u);
    s.remove_landmark(r.id);
    const auto after = s.snapshot();
    EXPECT_EQ(after->revision, 2u);
    const auto& f0 = before->dense().field.vectors;
    const auto& f1 = after->dense().field.vectors;
    double worst = 0.0;
    for (std::size_t i = 0; i < f0.size(); ++i) worst = std::max(worst, distance(f0[i], f1[i]));
    EXPECT_LT(worst, 1e-9);
}

TEST(Session, ManualAddsAdvanceRevisionAndShrinkVariance) {
    auto in = small_inputs(15, 3);
    in.config.kernels.mode = KernelMode::manual;
    in.config.kernels.manual = manual_kernels();
    Session s("s", in);
    const GridSpec probes{{5, 5, 5}, {12, 12, 12}, {8, 8, 8}};
    const std::array<Point3, 3> adds{Point3{20, 30, 40}, Point3{70, 10, 55}, Point3{45, 85, 15}};
    for (std::size_t k = 0; k < adds.size(); ++k) {
        const auto before = s.snapshot();
        const auto r = s.add_landmark_pair(adds[k], adds[k] + Vec3{1, 0, -1});
        EXPECT_EQ(r.id, static_cast<std::int64_t>(16 + k));
        EXPECT_LE(r.after.trace, r.before.trace);
        EXPECT_LE(r.after.trace, 3.0 * 0.05 + 1e-6);
        const auto after = s.snapshot();
        for (std::size_t v = 0; v < probes.voxel_count(); ++v) {
            const auto p = probes.world(v);
            for (std::size_t a = 0; a < 3; ++a)
                EXPECT_LE(Session::variance_at(*after, p).per_axis[a], Session::variance_at(*before, p).per_axis[a] + 1e-10);
        }
    }
    const auto sum = s.summary();
    EXPECT_EQ(sum["revision"], 3);
    EXPECT_EQ(sum["manual_landmark_count"], 3);
    EXPECT_EQ(sum["kernels"], to_json(manual_kernels()));
}

TEST(Session, EditErrors) {
    Session s("s", small_inputs(10, 4));
    const auto first = s.snapshot()->landmarks().pairs.front();
    try {
        s.add_landmark_pair(first.pre, first.post);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::duplicate);
    }
    EXPECT_THROW(s.add_landmark_pair({std::nan(""), 0, 0}, {0, 0, 0}), Error);
    try {
        s.remove_landmark(999);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_found);
    }
    EXPECT_EQ(s.snapshot()->revision, 0u);
}

TEST(Session, KernelRefits) {
    Session s("s", small_inputs(8, 5));
    try {
        s.refit_kernel({KernelMode::variogram, {}, {}, {}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unavailable);
        EXPECT_NE(std::string(e.what()).find("below landmark threshold"), std::string::npos);
    }
    EXPECT_EQ(s.snapshot()->revision, 0u);
    s.refit_kernel({KernelMode::manual, manual_kernels(3.0, 25.0, 0.1), {}, {}});
    EXPECT_EQ(s.summary()["kernels"], to_json(manual_kernels(3.0, 25.0, 0.1)));
    EXPECT_EQ(s.summary()["provenance"], "manual");
    EXPECT_THROW(s.refit_kernel({KernelMode::automatic, {}, {}, {}}), Error);
    s.refit_kernel({KernelMode::grid, {}, {}, {}});
    EXPECT_EQ(s.summary()["provenance"], "grid");
    EXPECT_EQ(s.snapshot()->revision, 2u);
}

TEST(Session, ExportIsByteIdenticalAndReloads) {
    TempDir dir;
    Session s("s", small_inputs(20, 6));
    s.export_to(dir / "a");
    s.export_to(dir / "b");
    for (const auto* name : {"bundle.json", "field.json", "field.raw", "uncertainty.json", "uncertainty.raw"})
        EXPECT_EQ(read_text_file(dir / "a" / name), read_text_file(dir / "b" / name)) << name;
    const auto bundle = read_model_bundle(dir / "a" / "bundle.json");
    EXPECT_EQ(bundle.landmarks, s.snapshot()->landmarks());
    const auto field = read_field(raster_paths(dir / "a" / "field"));
    EXPECT_EQ(field.grid, *small_inputs(20, 6).config.grid);
}

TEST(Session, FarFromLandmarksUncertaintyIsPrior) {
    auto in = small_inputs(10, 7);
    in.config.grid = GridSpec{{5000, 5000, 5000}, {1, 1, 1}, {4, 4, 4}};
    in.config.kernels.mode = KernelMode::manual;
    in.config.kernels.manual = manual_kernels(2.0, 10.0, 0.0);
    Session s("s", in);
    const auto f = s.get_slice(SliceKind::uncertainty, Axis::z, 0);
    for (const auto v : f.values) EXPECT_FLOAT_EQ(v, 6.0f);
    try {
        s.get_slice(SliceKind::uncertainty, Axis::z, 4);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::out_of_range);
    }
    try {
        s.get_slice(SliceKind::pre_volume, Axis::z, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unavailable);
    }
}

TEST(Session, VolumeSlices) {
    auto in = small_inputs(10, 8);
    const GridSpec g{{0, 0, 0}, {10, 10, 10}, {11, 11, 11}};
    in.config.grid = g;
    Volume vol{g, std::vector<float>(g.voxel_count())};
    for (std::size_t i = 0; i < vol.scalars.size(); ++i) vol.scalars[i] = static_cast<float>(g.world(i).x);
    in.pre_volume = vol;
    in.post_volume = vol;
    Session s("s", in);
    const auto pre = s.get_slice(SliceKind::pre_volume, Axis::z, 5);
    EXPECT_EQ(pre.values[3], 30.0f);
    const auto warped = s.get_slice(SliceKind::warped_volume, Axis::z, 5);
    EXPECT_EQ(warped.width, 11u);
    EXPECT_EQ(s.get_slice(SliceKind::field_magnitude, Axis::x, 0).height, 11u);
}

TEST(SessionManager, IdsAndLookup) {
    SessionManager m;
    const auto a = m.create(small_inputs(6, 9));
    const auto b = m.create(small_inputs(6, 10));
    EXPECT_EQ(a->id(), "s1");
    EXPECT_EQ(b->id(), "s2");
    EXPECT_EQ(m.get("s2"), b);
    try {
        m.get("s9");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_found);
    }
    EXPECT_EQ(m.all().size(), 2u);
}
