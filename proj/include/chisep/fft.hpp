#pragma once

#include <complex>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "chisep/volume.hpp"

namespace chisep::fft {

using Complex = std::complex<double>;

namespace detail {
// FFTW planning is not thread-safe; execution is.
inline std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}
} // namespace detail

/// In-place unnormalized 3D DFT over an x-fastest buffer. The inverse
/// direction divides by the voxel count so that inverse(forward(v)) == v.
inline void transform(std::vector<Complex>& buf, const Dims& d, bool inverse) {
    require(buf.size() == d.size(), ErrorCode::ShapeMismatch, "fft buffer size mismatch");
    auto* data = reinterpret_cast<fftw_complex*>(buf.data());
    fftw_plan plan;
    {
        std::lock_guard lock(detail::planner_mutex());
        plan = fftw_plan_dft_3d(static_cast<int>(d.nz), static_cast<int>(d.ny), static_cast<int>(d.nx), data, data,
                                inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard lock(detail::planner_mutex());
        fftw_destroy_plan(plan);
    }
    if (inverse) {
        const double scale = 1.0 / static_cast<double>(d.size());
        for (auto& c : buf) c *= scale;
    }
}

inline std::vector<Complex> forward(std::span<const double> real, const Dims& d) {
    std::vector<Complex> buf(real.begin(), real.end());
    transform(buf, d, false);
    return buf;
}

inline void inverse(std::vector<Complex>& buf, const Dims& d) { transform(buf, d, true); }

} // namespace chisep::fft
