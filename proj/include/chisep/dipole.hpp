#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "chisep/fft.hpp"
#include "chisep/volume.hpp"

namespace chisep {

/// Unit dipole response 1/3 - (k.b)^2/|k|^2 for a continuous frequency k.
/// Defined as 0 at k = 0.
inline double dipole_response(const Vec3& k, const Vec3& b0) {
    const double k2 = dot(k, k);
    if (k2 == 0.0) return 0.0;
    const double kb = dot(k, b0);
    return 1.0 / 3.0 - kb * kb / k2;
}

/// Signed frequency index in [-n/2, n/2) for FFT-order position j.
inline long signed_frequency(std::size_t j, std::size_t n) {
    const auto jj = static_cast<long>(j), nn = static_cast<long>(n);
    return jj < (nn + 1) / 2 ? jj : jj - nn;
}

/// k-space dipole kernel in FFT storage order (x fastest).
struct DipoleKernel {
    Dims dims{};
    Vec3 voxel_size{1.0, 1.0, 1.0};
    Vec3 b0_dir{0.0, 0.0, 1.0};
    std::vector<double> kvals;

    double operator[](std::size_t i) const { return kvals[i]; }

    bool matches(const Volume3D& v, double tol = 1e-9) const {
        if (!(v.dims() == dims)) return false;
        for (int i = 0; i < 3; ++i)
            if (std::abs(v.voxel_size()[i] - voxel_size[i]) > tol || std::abs(v.b0_dir()[i] - b0_dir[i]) > tol)
                return false;
        return true;
    }

    /// Continuous frequency (cycles/mm) of FFT-order sample (jx, jy, jz).
    Vec3 frequency(std::size_t jx, std::size_t jy, std::size_t jz) const {
        return {static_cast<double>(signed_frequency(jx, dims.nx)) / (static_cast<double>(dims.nx) * voxel_size[0]),
                static_cast<double>(signed_frequency(jy, dims.ny)) / (static_cast<double>(dims.ny) * voxel_size[1]),
                static_cast<double>(signed_frequency(jz, dims.nz)) / (static_cast<double>(dims.nz) * voxel_size[2])};
    }
};

inline DipoleKernel build_kernel(const Dims& dims, const Vec3& voxel_size, const Vec3& b0_dir) {
    require(dims.nx >= 2 && dims.ny >= 2 && dims.nz >= 2, ErrorCode::InvalidArgument,
            "kernel grid needs at least 2 samples per axis, got " + dims.str());
    require(is_unit(b0_dir), ErrorCode::BadB0, "b0 direction must have unit length");
    for (double v : voxel_size) require(v > 0.0, ErrorCode::InvalidArgument, "voxel size must be positive");
    DipoleKernel k{dims, voxel_size, b0_dir, std::vector<double>(dims.size())};
    std::size_t i = 0;
    for (std::size_t z = 0; z < dims.nz; ++z)
        for (std::size_t y = 0; y < dims.ny; ++y)
            for (std::size_t x = 0; x < dims.nx; ++x) k.kvals[i++] = dipole_response(k.frequency(x, y, z), b0_dir);
    // On even axes the Nyquist sample is its own mirror, so an oblique b0
    // breaks D(k) = D(-k) there. Averaging with the wrapped mirror keeps the
    // field real.
    std::vector<double> sym(k.kvals.size());
    i = 0;
    for (std::size_t z = 0; z < dims.nz; ++z)
        for (std::size_t y = 0; y < dims.ny; ++y)
            for (std::size_t x = 0; x < dims.nx; ++x, ++i) {
                const std::size_t mx = (dims.nx - x) % dims.nx, my = (dims.ny - y) % dims.ny, mz = (dims.nz - z) % dims.nz;
                sym[i] = 0.5 * (k.kvals[i] + k.kvals[(mz * dims.ny + my) * dims.nx + mx]);
            }
    k.kvals = std::move(sym);
    return k;
}

inline DipoleKernel build_kernel_for(const Volume3D& v) { return build_kernel(v.dims(), v.voxel_size(), v.b0_dir()); }

namespace detail {

inline void require_kernel_grid(const Volume3D& v, const DipoleKernel& k, const char* what) {
    require(k.matches(v), ErrorCode::GridMismatch,
            std::string(what) + ": volume grid/b0 " + v.dims().str() + " does not match kernel " + k.dims.str());
}

/// IFFT(weights .* FFT(values)); returns the real part and reports the
/// largest imaginary residue.
inline std::vector<double> kspace_multiply(std::span<const double> values, const Dims& d,
                                           std::span<const double> weights, double* max_imag = nullptr) {
    auto buf = fft::forward(values, d);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] *= weights[i];
    fft::inverse(buf, d);
    std::vector<double> out(buf.size());
    double imag = 0.0;
    for (std::size_t i = 0; i < buf.size(); ++i) {
        out[i] = buf[i].real();
        imag = std::max(imag, std::abs(buf[i].imag()));
    }
    if (max_imag) *max_imag = imag;
    return out;
}

} // namespace detail

/// Field (ppm) induced by a susceptibility map (ppm) under periodic boundary conditions.
inline Volume3D forward_field(const Volume3D& chi, const DipoleKernel& kernel, double* max_imag = nullptr) {
    detail::require_kernel_grid(chi, kernel, "forward_field");
    auto out = detail::kspace_multiply(chi.data(), chi.dims(), kernel.kvals, max_imag);
    return chi.with_data(std::move(out)).with_unit(Unit::ppm);
}

/// Direct circular convolution with the spatial-domain kernel. The kernel
/// itself is obtained by an explicit inverse DFT sum, so no FFT is involved.
inline Volume3D dipole_spatial_oracle(const Volume3D& chi) {
    const Dims d = chi.dims();
    require(d.size() <= 4096, ErrorCode::TooLarge, "oracle limited to 4096 voxels, got " + std::to_string(d.size()));
    const DipoleKernel k = build_kernel_for(chi);
    const std::size_t n = d.size();

    auto twiddles = [](std::size_t len) {
        std::vector<std::complex<double>> t(len);
        for (std::size_t j = 0; j < len; ++j) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(len);
            t[j] = {std::cos(a), std::sin(a)};
        }
        return t;
    };
    const auto tx = twiddles(d.nx), ty = twiddles(d.ny), tz = twiddles(d.nz);

    std::vector<double> spatial(n, 0.0);
    for (std::size_t rz = 0; rz < d.nz; ++rz)
        for (std::size_t ry = 0; ry < d.ny; ++ry)
            for (std::size_t rx = 0; rx < d.nx; ++rx) {
                std::complex<double> acc = 0.0;
                std::size_t ki = 0;
                for (std::size_t jz = 0; jz < d.nz; ++jz)
                    for (std::size_t jy = 0; jy < d.ny; ++jy) {
                        const auto yz = tz[(jz * rz) % d.nz] * ty[(jy * ry) % d.ny];
                        for (std::size_t jx = 0; jx < d.nx; ++jx, ++ki) acc += k.kvals[ki] * yz * tx[(jx * rx) % d.nx];
                    }
                spatial[chi.index(rx, ry, rz)] = acc.real() / static_cast<double>(n);
            }

    std::vector<double> out(n, 0.0);
    for (std::size_t rz = 0; rz < d.nz; ++rz)
        for (std::size_t ry = 0; ry < d.ny; ++ry)
            for (std::size_t rx = 0; rx < d.nx; ++rx) {
                double acc = 0.0;
                for (std::size_t sz = 0; sz < d.nz; ++sz)
                    for (std::size_t sy = 0; sy < d.ny; ++sy)
                        for (std::size_t sx = 0; sx < d.nx; ++sx) {
                            const std::size_t dx = (rx + d.nx - sx) % d.nx, dy = (ry + d.ny - sy) % d.ny,
                                              dz = (rz + d.nz - sz) % d.nz;
                            acc += spatial[chi.index(dx, dy, dz)] * chi.at(sx, sy, sz);
                        }
                out[chi.index(rx, ry, rz)] = acc;
            }
    return chi.with_data(std::move(out)).with_unit(Unit::ppm);
}

/// Truncated k-space division: chi(k) = field(k) / D(k) where |D(k)| >= threshold, else 0.
inline Volume3D tkd_invert(const Volume3D& field, const DipoleKernel& kernel, double threshold) {
    require(threshold > 0.0 && threshold < 2.0 / 3.0, ErrorCode::BadThreshold,
            "threshold must lie in (0, 2/3), got " + std::to_string(threshold));
    detail::require_kernel_grid(field, kernel, "tkd_invert");
    std::vector<double> inv(kernel.kvals.size(), 0.0);
    for (std::size_t i = 0; i < inv.size(); ++i)
        if (std::abs(kernel.kvals[i]) >= threshold) inv[i] = 1.0 / kernel.kvals[i];
    inv[0] = 0.0;
    auto out = detail::kspace_multiply(field.data(), field.dims(), inv);
    return field.with_data(std::move(out)).with_unit(Unit::ppm);
}

} // namespace chisep
