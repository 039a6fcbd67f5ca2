#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gpreg/gp.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/random.hpp"
#include "gpreg/tps.hpp"
#include "oracles.hpp"

using namespace gpreg;

namespace {

std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

KernelSpec random_kernel(Rng& rng) {
    const auto family = rng.below(2) == 0 ? KernelFamily::gaussian : KernelFamily::exponential;
    return KernelSpec::from_effective_range(family, rng.uniform(0.5, 5.0), rng.uniform(10.0, 80.0),
                                            rng.below(3) == 0 ? 0.0 : rng.uniform(0.01, 0.5));
}

} // namespace

TEST(Kernel, Values) {
    const KernelSpec g{KernelFamily::gaussian, 2.0, 300.0, 0.1};
    EXPECT_DOUBLE_EQ(g.covariance(0.0), 2.0);
    EXPECT_NEAR(g.covariance(10.0), 2.0 * std::exp(-100.0 / 300.0), 1e-15);
    EXPECT_NEAR(g.covariance_sq(100.0), g.covariance(10.0), 1e-15);
    EXPECT_NEAR(g.effective_range(), 30.0, 1e-12);
    const KernelSpec e{KernelFamily::exponential, 1.0, 5.0, 0.0};
    EXPECT_NEAR(e.covariance(5.0), std::exp(-1.0), 1e-15);
    EXPECT_NEAR(e.effective_range(), 15.0, 1e-12);
    // Correlation at the effective range is exp(-3), about 5%.
    EXPECT_NEAR(g.covariance(g.effective_range()) / g.sill, std::exp(-3.0), 1e-12);
    const auto r = KernelSpec::from_effective_range(KernelFamily::gaussian, 1.0, 20.0, 0.0);
    EXPECT_NEAR(r.effective_range(), 20.0, 1e-12);
    EXPECT_THROW((KernelSpec{KernelFamily::gaussian, -1.0, 1.0, 0.0}).validate(), Error);
    EXPECT_THROW((KernelSpec{KernelFamily::gaussian, 1.0, 0.0, 0.0}).validate(), Error);
    EXPECT_THROW((KernelSpec{KernelFamily::gaussian, 1.0, 1.0, -0.1}).validate(), Error);
    EXPECT_THROW(parse_kernel_family("matern"), Error);
}

TEST(GP, InterpolatesWithZeroNugget) {
    Rng rng(11);
    const auto x = oracle::random_points(rng, 30, 100.0);
    const auto y = normals(rng, 30, 2.0);
    const auto k = KernelSpec::from_effective_range(KernelFamily::gaussian, 4.0, 30.0, 0.0);
    const auto model = fit_gp_axis(k, x, y);
    const auto p = model.predict(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_NEAR(p[i].mean, y[i], 1e-6);
        EXPECT_LE(p[i].variance, 1e-8);
    }
}

TEST(GP, MatchesExplicitInverseOracle) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto n = 1 + rng.below(10);
        const auto k = random_kernel(rng);
        const auto x = oracle::random_points(rng, n, 100.0);
        const auto y = normals(rng, n);
        const auto model = fit_gp_axis(k, x, y);
        const auto q = oracle::random_points(rng, 5, 100.0);
        const auto p = model.predict(q);
        for (std::size_t j = 0; j < q.size(); ++j) {
            const auto ref = oracle::dense_posterior(k, x, y, q[j], model.jitter());
            EXPECT_LE(std::abs(p[j].mean - ref.mean) / std::max(std::abs(ref.mean), 1e-3), 1e-8);
            EXPECT_LE(std::abs(p[j].variance - ref.variance) / k.sill, 1e-8);
        }
    }
}

TEST(GP, PriorWithoutData) {
    const KernelSpec k{KernelFamily::exponential, 3.0, 10.0, 0.2};
    const auto model = fit_gp_axis(k, std::span<const Point3>{}, std::span<const double>{}, 0.5);
    const std::vector<Point3> q{{0, 0, 0}, {10, 10, 10}};
    for (const auto& p : model.predict(q)) {
        EXPECT_EQ(p.mean, 0.5);
        EXPECT_EQ(p.variance, 3.0);
    }
}

TEST(GP, VarianceNeverIncreasesWhenConditioning) {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const auto k = random_kernel(rng);
        const auto n = 1 + rng.below(20);
        auto x = oracle::random_points(rng, n, 100.0);
        auto y = normals(rng, n);
        const auto before = fit_gp_axis(k, x, y);
        x.push_back({rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 100)});
        y.push_back(rng.normal());
        const auto after = fit_gp_axis(k, x, y);
        const auto probes = oracle::random_points(rng, 20, 100.0);
        const auto vb = before.predict_variance(probes);
        const auto va = after.predict_variance(probes);
        for (std::size_t j = 0; j < probes.size(); ++j) EXPECT_LE(va[j], vb[j] + 1e-10);
    }
}

TEST(GP, VarianceAtNewLandmarkBoundedByNugget) {
    Rng rng(14);
    const auto k = KernelSpec::from_effective_range(KernelFamily::gaussian, 4.0, 40.0, 0.05);
    const auto x = oracle::random_points(rng, 25, 100.0);
    const auto model = fit_gp_axis(k, x, normals(rng, 25));
    for (const auto v : model.predict_variance(x)) EXPECT_LE(v, k.nugget + 1e-6);
}

TEST(GP, CovarianceDiagonalMatchesVarianceAndIsGuarded) {
    Rng rng(15);
    const auto k = KernelSpec::from_effective_range(KernelFamily::exponential, 2.0, 30.0, 0.1);
    const auto x = oracle::random_points(rng, 12, 100.0);
    const auto model = fit_gp_axis(k, x, normals(rng, 12));
    const auto q = oracle::random_points(rng, 8, 100.0);
    const auto cov = model.predict_covariance(q);
    const auto var = model.predict_variance(q);
    for (std::size_t j = 0; j < q.size(); ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        EXPECT_NEAR(cov(jj, jj), var[j], 1e-10);
        for (std::size_t i = 0; i < q.size(); ++i)
            EXPECT_NEAR(cov(jj, static_cast<Eigen::Index>(i)), cov(static_cast<Eigen::Index>(i), jj), 1e-12);
    }
    std::vector<Point3> many(max_covariance_queries + 1);
    for (std::size_t i = 0; i < many.size(); ++i) many[i] = {static_cast<double>(i), 0, 0};
    EXPECT_THROW((void)model.predict_covariance(many), Error);
}

TEST(GP, NuggetSmoothsRatherThanInterpolates) {
    Rng rng(16);
    const auto x = oracle::random_points(rng, 20, 100.0);
    const auto y = normals(rng, 20);
    const auto k = KernelSpec::from_effective_range(KernelFamily::gaussian, 1.0, 20.0, 0.5);
    const auto model = fit_gp_axis(k, x, y);
    const auto m = model.predict_mean(x);
    double max_residual = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) max_residual = std::max(max_residual, std::abs(m[i] - y[i]));
    EXPECT_GT(max_residual, 1e-3);
}

TEST(GP, JitterEscalatesOnNearDuplicates) {
    const auto k = KernelSpec::from_effective_range(KernelFamily::gaussian, 1.0, 50.0, 0.0);
    std::vector<Point3> x{{0, 0, 0}, {1e-7, 0, 0}, {10, 0, 0}};
    std::vector<double> y{1.0, 1.0, 0.0};
    const auto model = fit_gp_axis(k, x, y);
    EXPECT_GE(model.jitter(), initial_relative_jitter * k.sill);
    EXPECT_LE(model.jitter(), max_relative_jitter * k.sill);
    EXPECT_NEAR(model.predict_mean(x)[0], 1.0, 1e-3);
}

TEST(GP, RejectsBadInput) {
    const KernelSpec k{KernelFamily::gaussian, 1.0, 10.0, 0.0};
    std::vector<Point3> x{{0, 0, 0}};
    std::vector<double> y{std::nan("")};
    EXPECT_THROW(fit_gp_axis(k, x, y), Error);
    std::vector<double> two{1.0, 2.0};
    EXPECT_THROW(fit_gp_axis(k, x, two), Error);
    EXPECT_THROW(fit_gp_axis(KernelSpec{KernelFamily::gaussian, 0.0, 1.0, 0.0}, x, std::vector<double>{1.0}), Error);
}

TEST(GP, DenseBlockPathMatchesPointPath) {
    Rng rng(17);
    const auto k = KernelSpec::from_effective_range(KernelFamily::gaussian, 2.0, 35.0, 0.02);
    const auto x = oracle::random_points(rng, 15, 100.0);
    const auto model = fit_gp_axis(k, x, normals(rng, 15));
    const auto q = oracle::random_points(rng, 9, 100.0);
    Eigen::MatrixXd sq(15, 9);
    for (int i = 0; i < 15; ++i)
        for (int j = 0; j < 9; ++j) sq(i, j) = squared_distance(x[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(j)]);
    std::vector<double> mean(9), var(9);
    model.predict_from_sqdist(sq, mean.data(), var.data());
    const auto p = model.predict(q);
    for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_NEAR(mean[j], p[j].mean, 1e-12);
        EXPECT_NEAR(var[j], p[j].variance, 1e-12);
    }
}

TEST(ThinPlate, InterpolatesAndReproducesAffine) {
    Rng rng(18);
    const auto x = oracle::random_points(rng, 20, 100.0);
    std::vector<DisplacementObservation> obs;
    for (const auto& p : x) obs.push_back({p, {rng.normal(), rng.normal(), rng.normal()}});
    const auto model = fit_tps(obs);
    const auto pred = tps_predict(model, x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(distance(pred[i], obs[i].d), 1e-8);

    // A purely linear displacement field lies in the polynomial part and is reproduced everywhere.
    std::vector<DisplacementObservation> linear;
    auto f = [](const Point3& p) { return Vec3{0.01 * p.x - 2.0, 0.02 * p.y + 0.03 * p.z, 1.0}; };
    for (const auto& p : x) linear.push_back({p, f(p)});
    const auto lm = fit_tps(linear);
    for (const auto& q : oracle::random_points(rng, 10, 100.0))
        EXPECT_LT(distance(tps_predict(lm, std::vector<Point3>{q})[0], f(q)), 1e-8);
}

TEST(ThinPlate, Errors) {
    std::vector<DisplacementObservation> three{{{0, 0, 0}, {}}, {{1, 0, 0}, {}}, {{0, 1, 0}, {}}};
    EXPECT_THROW(fit_tps(three), Error);
    std::vector<DisplacementObservation> planar{{{0, 0, 0}, {}}, {{1, 0, 0}, {}}, {{0, 1, 0}, {}}, {{1, 1, 0}, {}}};
    try {
        fit_tps(planar);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::rank_deficient);
    }
}
