#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace chisep;
using testutil::random_mask;
using testutil::random_volume;

TEST(Volume, RejectsBadConstruction) {
    EXPECT_THROW(Volume3D(Dims{2, 2, 2}, std::vector<double>(7, 0.0)), Error);
    EXPECT_THROW(Volume3D(Dims{0, 2, 2}), Error);
    EXPECT_THROW(Volume3D(Dims{2, 2, 2}, Vec3{1.0, -1.0, 1.0}), Error);
    try {
        Volume3D(Dims{1, 1, 1}, {1.0, 1.0, 1.0}, Unit::ppm, {0.0, 0.0, 2.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BadB0);
    }
    std::vector<double> bad{std::nan("")};
    EXPECT_THROW(Volume3D(Dims{1, 1, 1}, bad), Error);
}

TEST(Volume, IndexOrderIsXFastest) {
    Volume3D v(Dims{3, 4, 5});
    EXPECT_EQ(v.index(1, 0, 0), 1u);
    EXPECT_EQ(v.index(0, 1, 0), 3u);
    EXPECT_EQ(v.index(0, 0, 1), 12u);
}

TEST(Normalize, ConstantVolumeIsDegenerate) {
    Volume3D v(Dims{2, 2, 2}, std::vector<double>(8, 3.5));
    try {
        normalize(v, Mask3D::full(v.dims()));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateStats);
    }
}

TEST(Normalize, TwoVoxelHandComputation) {
    Volume3D v(Dims{2, 1, 1}, std::vector<double>{1.0, 3.0});
    auto [n, s] = normalize(v, Mask3D::full(v.dims()));
    EXPECT_DOUBLE_EQ(s.mean, 2.0);
    EXPECT_DOUBLE_EQ(s.std, 1.0);
    EXPECT_DOUBLE_EQ(n[0], -1.0);
    EXPECT_DOUBLE_EQ(n[1], 1.0);
    const Volume3D back = denormalize(n, s);
    EXPECT_DOUBLE_EQ(back[0], 1.0);
    EXPECT_DOUBLE_EQ(back[1], 3.0);
}

TEST(Normalize, AlreadyStandardisedIsIdentity) {
    Volume3D v(Dims{4, 1, 1}, {-1.0, 1.0, -1.0, 1.0});
    auto [n, s] = normalize(v, Mask3D::full(v.dims()));
    EXPECT_NEAR(s.mean, 0.0, 1e-15);
    EXPECT_NEAR(s.std, 1.0, 1e-15);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(n[i], v[i], 1e-15);
}

TEST(Normalize, InMaskMomentsAndOutOfMaskAffine) {
    const Volume3D v = random_volume({5, 4, 3}, 1, -3.0, 7.0);
    const Mask3D m = random_mask(v.dims(), 2);
    auto [n, s] = normalize(v, m);
    double mean = 0.0, cnt = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i)
        if (m[i]) {
            mean += n[i];
            cnt += 1.0;
        }
    mean /= cnt;
    double var = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i)
        if (m[i]) var += (n[i] - mean) * (n[i] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(var / cnt), 1.0, 1e-9);
    for (std::size_t i = 0; i < n.size(); ++i) EXPECT_NEAR(n[i], (v[i] - s.mean) / s.std, 1e-12);
}

TEST(Normalize, RoundTripProperty) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Volume3D v = random_volume({6, 5, 4}, seed, -100.0, 100.0);
        auto [n, s] = normalize(v, random_mask(v.dims(), seed + 100));
        EXPECT_LT(testutil::max_abs_diff(denormalize(n, s), v), 1e-9);
        const NormStats id{0.0, 1.0, Unit::dimensionless};
        EXPECT_EQ(denormalize(v, id).values(), v.values());
    }
}

TEST(Normalize, RejectsMismatchedMask) {
    const Volume3D v = random_volume({4, 4, 4}, 3);
    EXPECT_THROW(normalize(v, Mask3D::full({4, 4, 3})), Error);
}

TEST(FiniteGradient, ConstantAndRamp) {
    Volume3D c(Dims{4, 3, 2}, std::vector<double>(24, 2.0));
    for (Axis a : {Axis::x, Axis::y, Axis::z}) {
        const Volume3D g = finite_gradient(c, a);
        for (double v : g.data()) EXPECT_EQ(v, 0.0);
    }
    Volume3D ramp(Dims{4, 3, 2});
    for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 3; ++y)
            for (std::size_t x = 0; x < 4; ++x) ramp.at(x, y, z) = double(x);
    const Volume3D g = finite_gradient(ramp, Axis::x);
    for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 3; ++y)
            for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(g.at(x, y, z), x == 3 ? 0.0 : 1.0);
}

TEST(FiniteGradient, MatchesSubtractionOracle) {
    const Volume3D v = random_volume({4, 4, 4}, 9);
    for (int a = 0; a < 3; ++a) {
        const Volume3D g = finite_gradient(v, static_cast<Axis>(a));
        for (std::size_t z = 0; z < 4; ++z)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x) {
                    std::size_t p[3] = {x, y, z};
                    double want = 0.0;
                    if (p[a] < 3) {
                        p[a] += 1;
                        want = v.at(p[0], p[1], p[2]) - v.at(x, y, z);
                    }
                    EXPECT_EQ(g.at(x, y, z), want);
                }
    }
}

TEST(FiniteGradient, LinearAndShortAxis) {
    const Volume3D u = random_volume({5, 4, 3}, 1), w = random_volume({5, 4, 3}, 2);
    std::vector<double> comb(u.size());
    for (std::size_t i = 0; i < comb.size(); ++i) comb[i] = 2.5 * u[i] - 0.5 * w[i];
    const Volume3D gc = finite_gradient(u.with_data(comb), Axis::y);
    const Volume3D gu = finite_gradient(u, Axis::y), gw = finite_gradient(w, Axis::y);
    for (std::size_t i = 0; i < comb.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gu[i] - 0.5 * gw[i], 1e-14);
    try {
        finite_gradient(Volume3D(Dims{4, 4, 1}), Axis::z);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::AxisTooShort);
    }
}

TEST(Regression, ExactLine) {
    const std::vector<double> xs{0.0, 1.0, 2.0, 3.0}, ys{0.0, 2.0, 4.0, 6.0};
    const auto r = linear_regression(xs, ys);
    EXPECT_NEAR(r.slope, 2.0, 1e-15);
    EXPECT_NEAR(r.intercept, 0.0, 1e-15);
    EXPECT_NEAR(r.r_squared, 1.0, 1e-12);
    EXPECT_EQ(r.n_points, 4u);
}

TEST(Regression, ConstantYGivesZeroRSquared) {
    const std::vector<double> xs{1.0, 2.0, 3.0}, ys{5.0, 5.0, 5.0};
    const auto r = linear_regression(xs, ys);
    EXPECT_EQ(r.slope, 0.0);
    EXPECT_EQ(r.r_squared, 0.0);
}

TEST(Regression, NoisyLineMatchesNormalEquations) {
    const std::vector<double> xs{0.1, 0.7, 1.3, 2.2, 3.0}, ys{1.05, 2.31, 3.42, 5.51, 6.87};
    // 2x2 normal equations solved by Cramer's rule
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double det = 5 * sxx - sx * sx;
    const double slope = (5 * sxy - sx * sy) / det, icpt = (sxx * sy - sx * sxy) / det;
    const auto r = linear_regression(xs, ys);
    EXPECT_NEAR(r.slope, slope, 1e-10);
    EXPECT_NEAR(r.intercept, icpt, 1e-10);
    EXPECT_GT(r.r_squared, 0.99);
    EXPECT_LE(r.r_squared, 1.0);
}

TEST(Regression, DegenerateX) {
    const std::vector<double> xs{2.0, 2.0, 2.0}, ys{1.0, 2.0, 3.0};
    try {
        linear_regression(xs, ys);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateX);
    }
    const std::vector<double> one{1.0};
    EXPECT_THROW(linear_regression(one, one), Error);
}

TEST(Errors, NumericalClassification) {
    EXPECT_TRUE(is_numerical(ErrorCode::DegenerateStats));
    EXPECT_TRUE(is_numerical(ErrorCode::DivergedLoss));
    EXPECT_FALSE(is_numerical(ErrorCode::GridMismatch));
    EXPECT_EQ(to_string(ErrorCode::GridMismatch), "GridMismatch");
}
