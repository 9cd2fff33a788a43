#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "chisep/series.hpp"
#include "chisep/volume.hpp"

namespace chisep {

/// Removes 2*pi jumps between echoes by predicting each echo's phase from the
/// previous (already unwrapped) echo scaled by the echo-time ratio.
inline MultiEchoSeries temporal_unwrap(const MultiEchoSeries& s) {
    require(s.echo_count() >= 2, ErrorCode::TooFewEchoes, "temporal unwrapping needs at least 2 echoes");
    require(s.has_phase(), ErrorCode::InvalidArgument, "series has no phase");
    s.validate();
    constexpr double two_pi = 2.0 * std::numbers::pi;
    MultiEchoSeries out = s;
    for (std::size_t e = 1; e < s.echo_count(); ++e) {
        const double ratio = s.echo_times[e] / s.echo_times[e - 1];
        const Volume3D& prev = out.phase[e - 1];
        Volume3D& cur = out.phase[e];
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double predicted = prev[i] * ratio;
            cur[i] += two_pi * std::round((predicted - cur[i]) / two_pi);
        }
    }
    out.wrapped = false;
    return out;
}

/// Local field (Hz) as the TE*magnitude weighted average of per-echo
/// frequency estimates phase / (2 pi TE).
inline Volume3D combine_echoes_weighted(const MultiEchoSeries& s) {
    require(s.echo_count() >= 1, ErrorCode::TooFewEchoes, "no echoes");
    require(s.has_phase(), ErrorCode::InvalidArgument, "series has no phase");
    s.validate();
    const auto& te = s.echo_times;
    for (double t : te) require(t > 0.0, ErrorCode::BadEchoTimes, "echo times must be positive for field estimation");
    const std::size_t n = s.phase.front().size();
    for (std::size_t e = 0; e + 1 < s.echo_count(); ++e) {
        const double ratio = te[e + 1] / te[e];
        for (std::size_t i = 0; i < n; ++i)
            if (std::abs(s.phase[e + 1][i] - s.phase[e][i] * ratio) > std::numbers::pi)
                fail(ErrorCode::WrappedInput, "phase jump above pi between echoes " + std::to_string(e) + " and " +
                                                  std::to_string(e + 1) + "; unwrap first");
    }
    std::vector<double> f(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double wsum = 0.0, acc = 0.0;
        for (std::size_t e = 0; e < s.echo_count(); ++e) {
            const double w = te[e] * s.magnitude[e][i];
            wsum += w;
            acc += w * s.phase[e][i] / (2.0 * std::numbers::pi * te[e]);
        }
        f[i] = wsum < 1e-12 ? 0.0 : acc / wsum;
    }
    return s.phase.front().with_data(std::move(f)).with_unit(Unit::hertz);
}

inline double hz_per_ppm(double b0_tesla) {
    require(b0_tesla > 0.0, ErrorCode::BadB0, "field strength must be positive");
    return kGammaBarHzPerTesla * b0_tesla * 1e-6;
}

inline Volume3D field_hz_to_ppm(const Volume3D& field, double b0_tesla) {
    const double scale = 1.0 / hz_per_ppm(b0_tesla);
    std::vector<double> out(field.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = field[i] * scale;
    return field.with_data(std::move(out)).with_unit(Unit::ppm);
}

inline Volume3D field_ppm_to_hz(const Volume3D& field, double b0_tesla) {
    const double scale = hz_per_ppm(b0_tesla);
    std::vector<double> out(field.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = field[i] * scale;
    return field.with_data(std::move(out)).with_unit(Unit::hertz);
}

} // namespace chisep
