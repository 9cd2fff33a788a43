#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace chisep;
using testutil::max_abs;
using testutil::max_abs_diff;
using testutil::random_volume;

TEST(Kernel, AnalyticValues) {
    const Vec3 b{0.0, 0.0, 1.0};
    EXPECT_NEAR(dipole_response({0.0, 0.0, 0.3}, b), -2.0 / 3.0, 1e-12);
    EXPECT_NEAR(dipole_response({0.2, -0.1, 0.0}, b), 1.0 / 3.0, 1e-12);
    // (k.b)^2 = |k|^2/3
    EXPECT_NEAR(dipole_response({1.0, 1.0, 1.0}, b), 0.0, 1e-12);
    EXPECT_NEAR(dipole_response({std::sqrt(2.0), 0.0, 1.0}, b), 0.0, 1e-12);
    EXPECT_EQ(dipole_response({0.0, 0.0, 0.0}, b), 0.0);
}

TEST(Kernel, GridFrequencies) {
    const Dims d{8, 6, 5};
    const Vec3 vs{0.5, 1.0, 2.0};
    const auto k = build_kernel(d, vs, {0.0, 0.0, 1.0});
    EXPECT_EQ(k[0], 0.0);
    // index n/2 is the negative Nyquist frequency
    EXPECT_DOUBLE_EQ(k.frequency(4, 0, 0)[0], -4.0 / (8 * 0.5));
    EXPECT_DOUBLE_EQ(k.frequency(0, 2, 0)[1], 2.0 / 6.0);
    EXPECT_DOUBLE_EQ(k.frequency(0, 0, 3)[2], -2.0 / 10.0);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x)
                EXPECT_NEAR(k[(z * d.ny + y) * d.nx + x], testutil::dipole_at(x, y, z, d, vs, {0.0, 0.0, 1.0}),
                            1e-15);
}

TEST(Kernel, RangeAndSymmetry) {
    for (const Vec3& b : testutil::six_orientations()) {
        const Dims d{7, 8, 6};
        const auto k = build_kernel(d, {1.0, 1.2, 0.9}, b);
        for (std::size_t z = 0; z < d.nz; ++z)
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const double v = k[(z * d.ny + y) * d.nx + x];
                    EXPECT_GE(v, -2.0 / 3.0 - 1e-15);
                    EXPECT_LE(v, 1.0 / 3.0 + 1e-15);
                    // k -> -k with index wrap-around
                    const std::size_t mx = (d.nx - x) % d.nx, my = (d.ny - y) % d.ny, mz = (d.nz - z) % d.nz;
                    EXPECT_NEAR(v, k[(mz * d.ny + my) * d.nx + mx], 1e-15);
                }
    }
}

TEST(Kernel, TraceFreeOnCubicGrids) {
    for (std::size_t n : {4u, 5u, 8u, 9u})
        for (const Vec3& b : {Vec3{0, 0, 1}, Vec3{1, 0, 0}, Vec3{0, 1, 0}}) {
            const auto k = build_kernel({n, n, n}, {1.0, 1.0, 1.0}, b);
            double s = 0.0;
            for (double v : k.kvals) s += v;
            EXPECT_NEAR(s / double(k.kvals.size()), 0.0, 1e-10) << n;
        }
}

TEST(Kernel, ObliqueNyquistIsMirrorAverage) {
    const Dims d{6, 6, 6};
    const Vec3 b = testutil::tilted(20, 20), vs{1, 1, 1};
    const auto k = build_kernel(d, vs, b);
    // (3, 1, 0) is kx = -3 (Nyquist), ky = 1; its wrapped mirror is (3, 5, 0)
    const double expect = 0.5 * (testutil::dipole_at(3, 1, 0, d, vs, b) + testutil::dipole_at(3, 5, 0, d, vs, b));
    EXPECT_NEAR(k[1 * 6 + 3], expect, 1e-15);
    EXPECT_NEAR(k[1 * 6 + 2], testutil::dipole_at(2, 1, 0, d, vs, b), 1e-15);
}

TEST(Kernel, Errors) {
    EXPECT_THROW(build_kernel({4, 4, 4}, {1, 1, 1}, {0.0, 0.0, 2.0}), Error);
    try {
        build_kernel({4, 4, 4}, {1, 1, 1}, {0.0, 0.1, 1.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BadB0);
    }
    EXPECT_THROW(build_kernel({1, 4, 4}, {1, 1, 1}, {0, 0, 1}), Error);
}

TEST(ForwardField, UniformSourceGivesZero) {
    Volume3D chi(Dims{6, 6, 6}, std::vector<double>(216, 0.3));
    const auto k = build_kernel_for(chi);
    EXPECT_LT(max_abs(forward_field(chi, k)), 1e-14);
    EXPECT_LT(max_abs(dipole_spatial_oracle(chi)), 1e-14);
}

TEST(ForwardField, MatchesSpatialOracle) {
    int trial = 0;
    for (Dims d : {Dims{6, 6, 6}, Dims{8, 8, 8}, Dims{5, 7, 6}, Dims{16, 16, 16}}) {
        for (const Vec3& b : {Vec3{0, 0, 1}, testutil::tilted(20, 20)}) {
            const auto chi = random_volume(d, 100 + trial++, -0.1, 0.1, {1.0, 0.8, 1.3}, b);
            double imag = 1.0;
            const auto f = forward_field(chi, build_kernel_for(chi), &imag);
            EXPECT_LT(max_abs_diff(f, dipole_spatial_oracle(chi)), 1e-10) << d.str();
            double norm = 0.0;
            for (double v : chi.data()) norm += v * v;
            EXPECT_LT(imag, 1e-10 * std::sqrt(norm));
        }
    }
}

TEST(ForwardField, MatchesBruteForceDft) {
    const auto chi = random_volume({6, 5, 4}, 9, -1.0, 1.0, {1.0, 1.0, 1.0}, testutil::tilted(30, 0));
    EXPECT_LT(max_abs_diff(forward_field(chi, build_kernel_for(chi)), testutil::dft_forward_field(chi)), 1e-12);
}

TEST(ForwardField, DeltaSourceIsShiftedKernel) {
    Volume3D delta(Dims{8, 8, 8});
    delta.at(0, 0, 0) = 1.0;
    const auto base = dipole_spatial_oracle(delta);
    Volume3D shifted(Dims{8, 8, 8});
    shifted.at(3, 1, 6) = 1.0;
    const auto f = forward_field(shifted, build_kernel_for(shifted));
    for (std::size_t z = 0; z < 8; ++z)
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                EXPECT_NEAR(f.at(x, y, z), base.at((x + 5) % 8, (y + 7) % 8, (z + 2) % 8), 1e-12);
}

TEST(ForwardField, LinearAndSelfAdjoint) {
    const auto u = random_volume({8, 8, 8}, 1), v = random_volume({8, 8, 8}, 2);
    const auto k = build_kernel_for(u);
    const double a = 2.5, b = -0.75;
    std::vector<double> mix(u.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * u[i] + b * v[i];
    const auto fm = forward_field(u.with_data(mix), k), fu = forward_field(u, k), fv = forward_field(v, k);
    double scale = 0.0;
    for (std::size_t i = 0; i < mix.size(); ++i) scale = std::max(scale, std::abs(fm[i]));
    for (std::size_t i = 0; i < mix.size(); ++i) EXPECT_NEAR(fm[i], a * fu[i] + b * fv[i], 1e-12 * scale);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        lhs += fu[i] * v[i];
        rhs += u[i] * fv[i];
    }
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(ForwardField, GridMismatch) {
    const auto chi = random_volume({6, 6, 6}, 3);
    const auto k = build_kernel({6, 6, 5}, {1, 1, 1}, {0, 0, 1});
    try {
        forward_field(chi, k);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
    }
    EXPECT_THROW(forward_field(chi, build_kernel({6, 6, 6}, {1, 1, 1}, testutil::tilted(10, 0))), Error);
}

TEST(Oracle, TooLarge) {
    try {
        dipole_spatial_oracle(Volume3D(Dims{17, 16, 16}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TooLarge);
    }
}

TEST(Tkd, ProjectionProperty) {
    const auto chi = random_volume({8, 8, 8}, 4, -0.1, 0.1);
    const auto k = build_kernel_for(chi);
    const auto field = forward_field(chi, k);
    for (double t : {0.05, 0.2, 0.5}) {
        const auto again = forward_field(tkd_invert(field, k, t), k);
        const auto fa = fft::forward(field.data(), field.dims());
        const auto fb = fft::forward(again.data(), again.dims());
        for (std::size_t i = 1; i < fa.size(); ++i)
            if (std::abs(k[i]) >= t) EXPECT_LT(std::abs(fa[i] - fb[i]), 1e-9);
            else EXPECT_LT(std::abs(fb[i]), 1e-9);
    }
}

TEST(Tkd, ZeroFieldAndThresholdErrors) {
    Volume3D f(Dims{6, 6, 6});
    const auto k = build_kernel_for(f);
    EXPECT_EQ(max_abs(tkd_invert(f, k, 0.1)), 0.0);
    for (double t : {0.0, -0.1, 2.0 / 3.0, 1.0}) {
        try {
            tkd_invert(f, k, t);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::BadThreshold);
        }
    }
}

TEST(Tkd, HarsherThresholdLosesMore) {
    const auto ph = generate_phantom(brain_like_spec(32), 0);
    const auto chi = ph.chi_total();
    const auto k = build_kernel_for(chi);
    const auto field = forward_field(chi, k);
    const double lo = testutil::nrmse_pct(tkd_invert(field, k, 0.1), chi, ph.brain_mask);
    const double hi = testutil::nrmse_pct(tkd_invert(field, k, 0.6), chi, ph.brain_mask);
    EXPECT_GT(hi, lo);
}
