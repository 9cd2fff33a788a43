#pragma once

#include <algorithm>
#include <vector>

#include "chisep/dipole.hpp"
#include "chisep/fft.hpp"
#include "chisep/volume.hpp"

namespace chisep {

/// Local field (ppm) acquired with a given B0 direction in the object frame.
struct OrientedField {
    Volume3D field;
    Vec3 b0_dir{0.0, 0.0, 1.0};
};

struct CosmosOptions {
    double epsilon = 1e-6;
    bool allow_single = false; ///< permit one orientation (plain k-space division)
};

/// Multi-orientation least squares: chi(k) = sum D_i phi_i / (sum D_i^2 + eps).
inline Volume3D cosmos(std::span<const OrientedField> fields, const CosmosOptions& opt = {}) {
    require(!fields.empty(), ErrorCode::TooFewOrientations, "no orientations");
    require(fields.size() >= 2 || opt.allow_single, ErrorCode::TooFewOrientations,
            "COSMOS needs at least 2 orientations, got " + std::to_string(fields.size()));
    require(opt.epsilon >= 0.0, ErrorCode::InvalidArgument, "epsilon must be nonnegative");
    const Volume3D& ref = fields.front().field;
    const Dims d = ref.dims();
    std::vector<fft::Complex> num(d.size(), 0.0);
    std::vector<double> den(d.size(), opt.epsilon);
    for (const auto& f : fields) {
        require_same_grid(f.field, ref, "cosmos");
        const DipoleKernel k = build_kernel(d, ref.voxel_size(), f.b0_dir);
        const auto spec = fft::forward(f.field.data(), d);
        for (std::size_t i = 0; i < d.size(); ++i) {
            num[i] += k.kvals[i] * spec[i];
            den[i] += k.kvals[i] * k.kvals[i];
        }
    }
    for (std::size_t i = 0; i < d.size(); ++i) num[i] = den[i] > 0.0 ? num[i] / den[i] : fft::Complex(0.0);
    num[0] = 0.0;
    fft::inverse(num, d);
    std::vector<double> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = num[i].real();
    return ref.with_data(std::move(out)).with_unit(Unit::ppm).with_b0({0.0, 0.0, 1.0});
}

struct SourceMaps {
    Volume3D chi_para;
    Volume3D chi_dia;
};

/// Solves chi_para - chi_dia = chi_tot and chi_para + chi_dia = R2'/D_r per
/// voxel. With clamp set, negatives are zeroed; outside the mask both are 0.
inline SourceMaps decompose_sources(const Volume3D& chi_tot, const Volume3D& r2prime, double dr,
                                    const Mask3D& brain_mask, bool clamp = true) {
    require(dr > 0.0, ErrorCode::BadDr, "relaxometric constant must be positive");
    require_same_grid(chi_tot, r2prime, "decompose_sources");
    require_mask(chi_tot, brain_mask, "decompose_sources");
    std::vector<double> para(chi_tot.size(), 0.0), dia(chi_tot.size(), 0.0);
    for (std::size_t i = 0; i < chi_tot.size(); ++i) {
        if (!brain_mask[i]) continue;
        const double sum = r2prime[i] / dr;
        para[i] = (sum + chi_tot[i]) / 2.0;
        dia[i] = (sum - chi_tot[i]) / 2.0;
        if (clamp) {
            para[i] = std::max(0.0, para[i]);
            dia[i] = std::max(0.0, dia[i]);
        }
    }
    const Volume3D templ = chi_tot.with_unit(Unit::ppm);
    return {templ.with_data(std::move(para)), templ.with_data(std::move(dia))};
}

inline SourceMaps chi_sep_cosmos(std::span<const OrientedField> fields, const Volume3D& r2prime, double dr,
                                 const Mask3D& brain_mask, double epsilon = 1e-6) {
    require(dr > 0.0, ErrorCode::BadDr, "relaxometric constant must be positive");
    for (double v : r2prime.data()) require(v >= 0.0, ErrorCode::InvalidArgument, "R2' must be nonnegative");
    const Volume3D chi_tot = cosmos(fields, {epsilon, false});
    return decompose_sources(chi_tot, r2prime, dr, brain_mask);
}

/// Single-orientation baseline: thresholded k-space division followed by the
/// same two-source decomposition.
inline SourceMaps chi_sep_single(const Volume3D& field, const Volume3D& r2prime, double dr,
                                 const DipoleKernel& kernel, double threshold, const Mask3D& brain_mask) {
    require(dr > 0.0, ErrorCode::BadDr, "relaxometric constant must be positive");
    const Volume3D chi_tot = tkd_invert(field, kernel, threshold);
    return decompose_sources(chi_tot.with_b0(r2prime.b0_dir()), r2prime, dr, brain_mask);
}

} // namespace chisep
