#pragma once

#include <vector>

#include "chisep/volume.hpp"

namespace chisep {

/// Proton gyromagnetic ratio over 2 pi, Hz per tesla.
inline constexpr double kGammaBarHzPerTesla = 42.577478e6;

/// Per-echo magnitude and phase volumes. Spin-echo series carry no phase.
struct MultiEchoSeries {
    std::vector<double> echo_times; ///< seconds, strictly increasing
    std::vector<Volume3D> magnitude;
    std::vector<Volume3D> phase; ///< radians; empty for magnitude-only series
    double b0_tesla = 3.0;
    bool wrapped = false; ///< phase lies in (-pi, pi]

    std::size_t echo_count() const { return echo_times.size(); }
    bool has_phase() const { return !phase.empty(); }
    const Dims& dims() const { return magnitude.front().dims(); }

    void validate() const {
        require(!echo_times.empty(), ErrorCode::TooFewEchoes, "series has no echoes");
        require(magnitude.size() == echo_times.size(), ErrorCode::ShapeMismatch,
                "magnitude volume count differs from echo count");
        require(phase.empty() || phase.size() == echo_times.size(), ErrorCode::ShapeMismatch,
                "phase volume count differs from echo count");
        for (std::size_t e = 1; e < echo_times.size(); ++e)
            require(echo_times[e] > echo_times[e - 1], ErrorCode::BadEchoTimes,
                    "echo times must be strictly increasing");
        require(echo_times.front() >= 0.0, ErrorCode::BadEchoTimes, "echo times must be nonnegative");
        for (const auto& m : magnitude) require_same_grid(m, magnitude.front(), "series magnitude");
        for (const auto& p : phase) require_same_grid(p, magnitude.front(), "series phase");
    }
};

} // namespace chisep
