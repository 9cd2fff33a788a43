#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace chisep;
using testutil::exponential_series;

namespace {

Volume3D filled(Dims d, double v) { return Volume3D(d, std::vector<double>(d.size(), v)); }

double rel_err(double a, double b) { return std::abs(a - b) / std::abs(b); }

} // namespace

TEST(Arlo, NoiselessFiftyPerSecond) {
    const Dims d{2, 2, 1};
    const auto s = exponential_series(default_gre_echo_times(), filled(d, 50.0), filled(d, 1.0));
    const auto r = fit_r2star_arlo(s);
    for (double v : r.data()) EXPECT_NEAR(v, 50.0, 0.25);
    EXPECT_EQ(r.unit(), Unit::per_second);
}

TEST(Arlo, ConstantSignalGivesZero) {
    const Dims d{3, 1, 1};
    const auto s = exponential_series(default_gre_echo_times(), filled(d, 0.0), filled(d, 2.0));
    const auto r = fit_r2star_arlo(s);
    for (double v : r.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(Arlo, MatchesLogLinearAcrossRange) {
    const Dims d{10, 10, 5};
    const auto r2s = testutil::random_volume(d, 3, 5.0, 100.0);
    const auto m0 = testutil::random_volume(d, 4, 0.2, 2.0);
    const auto s = exponential_series(default_gre_echo_times(), r2s, m0);
    const auto a = fit_r2star_arlo(s), l = fit_r2star_loglinear(s);
    for (std::size_t i = 0; i < r2s.size(); ++i) {
        EXPECT_LT(rel_err(a[i], l[i]), 0.005) << r2s[i];
        EXPECT_LT(rel_err(a[i], r2s[i]), 0.005) << r2s[i];
    }
}

TEST(Arlo, ClampsAndSkipsZeroSignal) {
    const Dims d{3, 1, 1};
    Volume3D r2s(d, std::vector<double>{-20.0, 30.0, 30.0});
    Volume3D m0(d, std::vector<double>{1.0, 1.0, 0.0});
    const auto r = fit_r2star_arlo(exponential_series(default_gre_echo_times(), r2s, m0));
    EXPECT_EQ(r[0], 0.0);
    EXPECT_GT(r[1], 29.0);
    EXPECT_EQ(r[2], 0.0);
}

TEST(Arlo, FuzzedSignalsStayFiniteAndNonnegative) {
    const Dims d{16, 16, 4};
    MultiEchoSeries s;
    s.echo_times = default_gre_echo_times();
    for (std::size_t e = 0; e < 6; ++e) s.magnitude.push_back(testutil::random_volume(d, 50 + e, 0.0, 3.0));
    const auto fitted = fit_r2star_arlo(s);
    for (double v : fitted.data()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
    }
}

TEST(Arlo, Errors) {
    const Dims d{1, 1, 1};
    const std::vector<double> two{0.01, 0.02}, uneven{0.01, 0.02, 0.0301};
    try {
        fit_r2star_arlo(exponential_series(two, filled(d, 10), filled(d, 1)));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TooFewEchoes);
    }
    try {
        fit_r2star_arlo(exponential_series(uneven, filled(d, 10), filled(d, 1)));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonUniformSpacing);
    }
}

TEST(LogLinear, ExactExponential) {
    const Dims d{4, 1, 1};
    Volume3D r2s(d, std::vector<double>{0.0, 12.5, 37.0, 250.0});
    const auto r = fit_r2star_loglinear(exponential_series({0.004, 0.011, 0.02, 0.03}, r2s, filled(d, 0.7)));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], r2s[i], 1e-10);
}

TEST(LogLinear, TwoPointClosedForm) {
    MultiEchoSeries s;
    s.echo_times = {0.01, 0.025};
    s.magnitude = {Volume3D(Dims{1, 1, 1}, std::vector<double>{0.9}), Volume3D(Dims{1, 1, 1}, std::vector<double>{0.4})};
    EXPECT_NEAR(fit_r2star_loglinear(s)[0], std::log(0.9 / 0.4) / 0.015, 1e-12);
}

TEST(LogLinear, ZeroMagnitudeFlagged) {
    const Dims d{2, 1, 1};
    Volume3D m0(d, std::vector<double>{1.0, 0.0});
    Mask3D flagged;
    const auto r = fit_r2star_loglinear(exponential_series({0.01, 0.02, 0.03}, filled(d, 20), m0), &flagged);
    EXPECT_EQ(r[1], 0.0);
    EXPECT_EQ(flagged[1], 1);
    EXPECT_EQ(flagged[0], 0);
    EXPECT_THROW(fit_r2star_loglinear(exponential_series({0.01}, filled(d, 20), m0)), Error);
}

TEST(FitR2, SpinEchoDecay) {
    auto spec = brain_like_spec(16);
    for (auto& p : spec.primitives) p.r2 = 12.5;
    const auto ph = generate_phantom(spec, 0);
    const auto se = synthesize_se(ph, default_se_echo_times());
    const auto r2 = fit_r2(se);
    for (std::size_t i = 0; i < r2.size(); ++i)
        if (ph.brain_mask[i]) {
            EXPECT_NEAR(r2[i], 12.5, 1e-6);
        }
    EXPECT_EQ(r2.values(), fit_r2star_loglinear(se).values());
    const Dims d{2, 1, 1};
    const auto flat = fit_r2(exponential_series(default_se_echo_times(), filled(d, 0), filled(d, 1)));
    for (double v : flat.data())
        EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(R2Prime, DifferenceWithClamp) {
    const Dims d{3, 1, 1};
    Volume3D r2s(d, std::vector<double>{50.0, 30.0, 40.0}), r2(d, std::vector<double>{40.0, 40.0, 40.0});
    const auto p = compute_r2prime(r2s, r2);
    EXPECT_EQ(p.values(), (std::vector<double>{10.0, 0.0, 0.0}));
    const auto rnd = testutil::random_volume({5, 5, 5}, 8, 0.0, 20.0), base = testutil::random_volume({5, 5, 5}, 9, 0.0, 20.0);
    std::vector<double> sum(rnd.size());
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = rnd[i] + base[i];
    const auto again = compute_r2prime(rnd.with_data(sum), base);
    for (std::size_t i = 0; i < sum.size(); ++i) EXPECT_NEAR(again[i], rnd[i], 1e-12);
    EXPECT_THROW(compute_r2prime(r2s, Volume3D(Dims{3, 1, 2})), Error);
}

TEST(R2Prime, AlwaysNonnegative) {
    const auto a = testutil::random_volume({8, 8, 8}, 1, -50.0, 50.0), b = testutil::random_volume({8, 8, 8}, 2, -50.0, 50.0);
    const auto r2p = compute_r2prime(a, b);
    for (double v : r2p.data()) EXPECT_GE(v, 0.0);
}

TEST(EstimateDr, ExactLineAndScaling) {
    const auto ph = generate_phantom(brain_like_spec(32, 114.0), 0);
    const auto roi = ph.roi_mask({4, 5, 6, 7, 8});
    const auto r2p = true_r2prime(ph);
    const auto fit = estimate_dr(r2p, ph.chi_total(), roi);
    EXPECT_NEAR(fit.slope, 114.0, 1e-9);
    EXPECT_NEAR(fit.r_squared, 1.0, 1e-12);
    std::vector<double> twice(r2p.size());
    for (std::size_t i = 0; i < twice.size(); ++i) twice[i] = 2.0 * r2p[i];
    EXPECT_NEAR(estimate_dr(r2p.with_data(twice), ph.chi_total(), roi).slope, 228.0, 1e-9);
}

TEST(EstimateDr, Degenerate) {
    const Volume3D q(Dims{4, 4, 4}, std::vector<double>(64, 0.1)), r(Dims{4, 4, 4});
    try {
        estimate_dr(r, q, Mask3D::full({4, 4, 4}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateX);
    }
    EXPECT_THROW(estimate_dr(r, q, Mask3D({4, 4, 4})), Error);
}
