#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "chisep/series.hpp"
#include "chisep/volume.hpp"

namespace chisep {

namespace detail {

inline void require_magnitudes(const MultiEchoSeries& s, std::size_t min_echoes) {
    require(s.echo_count() >= min_echoes, ErrorCode::TooFewEchoes,
            "need at least " + std::to_string(min_echoes) + " echoes, got " + std::to_string(s.echo_count()));
    s.validate();
}

inline Volume3D rate_volume(const MultiEchoSeries& s, std::vector<double> values) {
    return s.magnitude.front().with_data(std::move(values)).with_unit(Unit::per_second);
}

} // namespace detail

/// Mono-exponential decay rate by auto-regression on linear operations.
///
/// For uniformly spaced echoes the integral of the signal over each echo
/// triplet equals T2* (S_i - S_{i+2}); the integral is approximated with
/// Simpson's rule and T2* solved in closed form over all triplets.
inline Volume3D fit_r2star_arlo(const MultiEchoSeries& s) {
    detail::require_magnitudes(s, 3);
    const auto& te = s.echo_times;
    const double dte = te[1] - te[0];
    for (std::size_t e = 1; e + 1 < te.size(); ++e)
        require(std::abs((te[e + 1] - te[e]) - dte) <= 1e-6, ErrorCode::NonUniformSpacing,
                "echo spacing must be uniform within 1e-6 s");
    const std::size_t n = s.magnitude.front().size();
    const std::size_t ne = te.size();
    const double h3 = dte / 3.0;
    std::vector<double> out(n, 0.0);
    for (std::size_t v = 0; v < n; ++v) {
        if (s.magnitude[0][v] < 1e-12) continue;
        double ss = 0.0, sd = 0.0, dd = 0.0;
        for (std::size_t e = 0; e + 2 < ne; ++e) {
            const double a = s.magnitude[e][v], b = s.magnitude[e + 1][v], c = s.magnitude[e + 2][v];
            const double integral = h3 * (a + 4.0 * b + c);
            const double diff = a - c;
            ss += integral * integral;
            sd += integral * diff;
            dd += diff * diff;
        }
        const double denom = ss + h3 * sd;
        if (denom <= 0.0) continue;
        // 1 / T2* with T2* = (ss + h3 sd) / (h3 dd + sd)
        const double rate = (h3 * dd + sd) / denom;
        out[v] = std::isfinite(rate) ? std::max(0.0, rate) : 0.0;
    }
    return detail::rate_volume(s, std::move(out));
}

/// Negated OLS slope of log magnitude against echo time, clamped at zero.
/// Voxels with any non-positive magnitude are set to 0 and flagged.
inline Volume3D fit_r2star_loglinear(const MultiEchoSeries& s, Mask3D* flagged = nullptr) {
    detail::require_magnitudes(s, 2);
    const auto& te = s.echo_times;
    const std::size_t ne = te.size();
    double mt = 0.0;
    for (double t : te) mt += t;
    mt /= static_cast<double>(ne);
    double stt = 0.0;
    for (double t : te) stt += (t - mt) * (t - mt);
    const std::size_t n = s.magnitude.front().size();
    std::vector<double> out(n, 0.0);
    if (flagged) *flagged = Mask3D(s.dims());
    std::vector<double> logs(ne);
    for (std::size_t v = 0; v < n; ++v) {
        bool ok = true;
        for (std::size_t e = 0; e < ne; ++e) {
            const double m = s.magnitude[e][v];
            if (!(m > 0.0)) {
                ok = false;
                break;
            }
            logs[e] = std::log(m);
        }
        if (!ok) {
            if (flagged) flagged->data[v] = 1;
            continue;
        }
        double ml = 0.0;
        for (double l : logs) ml += l;
        ml /= static_cast<double>(ne);
        double stl = 0.0;
        for (std::size_t e = 0; e < ne; ++e) stl += (te[e] - mt) * (logs[e] - ml);
        out[v] = std::max(0.0, -stl / stt);
    }
    return detail::rate_volume(s, std::move(out));
}

/// R2 from spin-echo magnitudes; same log-linear estimator as for R2*.
inline Volume3D fit_r2(const MultiEchoSeries& se) { return fit_r2star_loglinear(se); }

/// R2' = max(0, R2* - R2).
inline Volume3D compute_r2prime(const Volume3D& r2star, const Volume3D& r2) {
    require_same_grid(r2star, r2, "compute_r2prime");
    std::vector<double> out(r2star.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, r2star[i] - r2[i]);
    return r2star.with_data(std::move(out)).with_unit(Unit::per_second);
}

/// Relaxometric constant (Hz/ppm) as the OLS slope of in-ROI R2' against QSM.
inline RegressionResult estimate_dr(const Volume3D& r2prime, const Volume3D& qsm, const Mask3D& roi_mask) {
    require_same_grid(r2prime, qsm, "estimate_dr");
    require_mask(qsm, roi_mask, "estimate_dr");
    require(!roi_mask.empty(), ErrorCode::EmptyResult, "ROI mask is empty");
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < qsm.size(); ++i)
        if (roi_mask[i]) {
            xs.push_back(qsm[i]);
            ys.push_back(r2prime[i]);
        }
    return linear_regression(xs, ys);
}

} // namespace chisep
