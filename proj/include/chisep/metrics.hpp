#pragma once

// Image-quality metrics restricted to an evaluation mask, and per-ROI
// mean/regression reports.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chisep/volume.hpp"

namespace chisep {

/// brain AND NOT csf AND NOT vessels.
inline Mask3D eval_mask(const Mask3D& brain, const Mask3D& csf, const Mask3D& vessels) {
    require(brain.dims == csf.dims && brain.dims == vessels.dims, ErrorCode::GridMismatch,
            "evaluation masks must share dims");
    Mask3D out(brain.dims);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = brain[i] && !csf[i] && !vessels[i] ? 1 : 0;
    require(!out.empty(), ErrorCode::EmptyResult, "evaluation mask is empty");
    return out;
}

namespace detail {

inline void require_pair(const Volume3D& x, const Volume3D& ref, const Mask3D& mask, const char* what) {
    require_same_grid(x, ref, what);
    require_mask(ref, mask, what);
    require(!mask.empty(), ErrorCode::EmptyResult, std::string(what) + ": mask is empty");
}

/// Masked L2 norm ratio in percent.
inline double ratio_percent(std::span<const double> diff, std::span<const double> ref, const Mask3D& mask) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i)
        if (mask[i]) {
            num += diff[i] * diff[i];
            den += ref[i] * ref[i];
        }
    require(den > 0.0, ErrorCode::ZeroReference, "reference has zero norm inside the mask");
    return 100.0 * std::sqrt(num / den);
}

inline std::size_t clamp_index(long i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
}

/// Correlates along one axis with an odd-length kernel, replicate padding.
inline std::vector<double> filter_axis(std::span<const double> in, const Dims& d, int axis,
                                       std::span<const double> taps) {
    const long half = static_cast<long>(taps.size() / 2);
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
    const std::size_t n = d[axis];
    std::vector<double> out(in.size(), 0.0);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = (z * d.ny + y) * d.nx + x;
                const std::size_t pos = axis == 0 ? x : axis == 1 ? y : z;
                const std::size_t base = i - pos * stride;
                double acc = 0.0;
                for (std::size_t t = 0; t < taps.size(); ++t)
                    acc += taps[t] * in[base + clamp_index(static_cast<long>(pos) + static_cast<long>(t) - half, n) * stride];
                out[i] = acc;
            }
    return out;
}

inline std::vector<double> filter_separable(std::span<const double> in, const Dims& d, std::span<const double> kx,
                                            std::span<const double> ky, std::span<const double> kz) {
    auto a = filter_axis(in, d, 0, kx);
    auto b = filter_axis(a, d, 1, ky);
    return filter_axis(b, d, 2, kz);
}

inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
    require(size % 2 == 1, ErrorCode::InvalidArgument, "filter size must be odd");
    require(sigma > 0.0, ErrorCode::InvalidArgument, "sigma must be positive");
    std::vector<double> g(size);
    const double c = static_cast<double>(size / 2);
    double sum = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double t = static_cast<double>(i) - c;
        g[i] = std::exp(-t * t / (2.0 * sigma * sigma));
        sum += g[i];
    }
    for (auto& v : g) v /= sum;
    return g;
}

} // namespace detail

struct HfenOptions {
    std::size_t size = 15;
    double sigma = 1.5;
};

struct SsimOptions {
    std::size_t size = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

/// Dense LoG kernel [z][y][x]: Gaussian-weighted (r^2 - 3 sigma^2)/sigma^4,
/// shifted to zero sum.
inline std::vector<double> log_kernel(const HfenOptions& o = {}) {
    const auto g = detail::gaussian_taps(o.size, o.sigma);
    const std::size_t n = o.size;
    const double c = static_cast<double>(n / 2), s2 = o.sigma * o.sigma;
    std::vector<double> k(n * n * n);
    double sum = 0.0;
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c,
                             dz = static_cast<double>(z) - c;
                const double v = g[x] * g[y] * g[z] * (dx * dx + dy * dy + dz * dz - 3.0 * s2) / (s2 * s2);
                k[(z * n + y) * n + x] = v;
                sum += v;
            }
    const double mean = sum / static_cast<double>(k.size());
    for (auto& v : k) v -= mean;
    return k;
}

/// LoG filtering with replicate padding, evaluated separably: the kernel is a
/// sum of three separable terms minus a constant box.
inline std::vector<double> log_filter(std::span<const double> in, const Dims& d, const HfenOptions& o = {}) {
    const auto g = detail::gaussian_taps(o.size, o.sigma);
    const std::size_t n = o.size;
    const double c = static_cast<double>(n / 2), s2 = o.sigma * o.sigma;
    std::vector<double> q(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) - c;
        q[i] = g[i] * (t * t - s2) / (s2 * s2);
    }
    // DC of the uncorrected kernel, as in log_kernel()
    double dc = 0.0;
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c,
                             dz = static_cast<double>(z) - c;
                dc += g[x] * g[y] * g[z] * (dx * dx + dy * dy + dz * dz - 3.0 * s2) / (s2 * s2);
            }
    dc /= static_cast<double>(n * n * n);
    // The filter annihilates constants; removing one first keeps a constant
    // input at exactly zero output.
    std::vector<double> centred(in.begin(), in.end());
    if (!centred.empty()) {
        const double c0 = centred.front();
        for (auto& v : centred) v -= c0;
    }
    const std::vector<double> ones(n, 1.0);
    auto out = detail::filter_separable(centred, d, q, g, g);
    const auto ty = detail::filter_separable(centred, d, g, q, g);
    const auto tz = detail::filter_separable(centred, d, g, g, q);
    const auto box = detail::filter_separable(centred, d, ones, ones, ones);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += ty[i] + tz[i] - dc * box[i];
    return out;
}

/// 20 log10(peak / rmse) with peak = max in-mask |ref|; +inf for identical inputs.
inline double psnr(const Volume3D& x, const Volume3D& ref, const Mask3D& mask) {
    detail::require_pair(x, ref, mask, "psnr");
    double peak = 0.0, se = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ref.size(); ++i)
        if (mask[i]) {
            peak = std::max(peak, std::abs(ref[i]));
            se += (x[i] - ref[i]) * (x[i] - ref[i]);
            ++n;
        }
    require(peak > 0.0, ErrorCode::ZeroPeak, "reference peak is zero inside the mask");
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(peak / std::sqrt(se / static_cast<double>(n)));
}

/// 100 ||x - ref|| / ||ref|| over the mask.
inline double nrmse(const Volume3D& x, const Volume3D& ref, const Mask3D& mask) {
    detail::require_pair(x, ref, mask, "nrmse");
    std::vector<double> diff(x.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = x[i] - ref[i];
    return detail::ratio_percent(diff, ref.data(), mask);
}

/// NRMSE of LoG-filtered volumes; filtering sees the full volume, the
/// statistic only the mask.
inline double hfen(const Volume3D& x, const Volume3D& ref, const Mask3D& mask, const HfenOptions& o = {}) {
    detail::require_pair(x, ref, mask, "hfen");
    std::vector<double> diff(x.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = x[i] - ref[i];
    const auto fd = log_filter(diff, x.dims(), o);
    const auto fr = log_filter(ref.data(), ref.dims(), o);
    return detail::ratio_percent(fd, fr, mask);
}

/// Mean local SSIM over the mask, Gaussian window, replicate padding.
inline double ssim(const Volume3D& x, const Volume3D& ref, const Mask3D& mask, const SsimOptions& o = {}) {
    detail::require_pair(x, ref, mask, "ssim");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < ref.size(); ++i)
        if (mask[i]) {
            lo = std::min(lo, ref[i]);
            hi = std::max(hi, ref[i]);
        }
    const double range = hi - lo;
    require(range > 0.0, ErrorCode::ZeroDynamicRange, "reference is constant inside the mask");
    const double c1 = (o.k1 * range) * (o.k1 * range), c2 = (o.k2 * range) * (o.k2 * range);
    const auto g = detail::gaussian_taps(o.size, o.sigma);
    const Dims d = x.dims();
    const std::size_t n = x.size();
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = ref[i] * ref[i];
        xy[i] = x[i] * ref[i];
    }
    const auto mx = detail::filter_separable(x.data(), d, g, g, g);
    const auto my = detail::filter_separable(ref.data(), d, g, g, g);
    const auto exx = detail::filter_separable(xx, d, g, g, g);
    const auto eyy = detail::filter_separable(yy, d, g, g, g);
    const auto exy = detail::filter_separable(xy, d, g, g, g);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double vx = exx[i] - mx[i] * mx[i], vy = eyy[i] - my[i] * my[i], cxy = exy[i] - mx[i] * my[i];
        acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        ++count;
    }
    return acc / static_cast<double>(count);
}

struct MetricReport {
    double psnr_db = 0.0;
    double nrmse_percent = 0.0;
    double hfen_percent = 0.0;
    double ssim = 0.0;
    std::size_t mask_voxels = 0;
};

inline MetricReport evaluate(const Volume3D& x, const Volume3D& ref, const Mask3D& mask, const HfenOptions& h = {},
                             const SsimOptions& s = {}) {
    return {psnr(x, ref, mask), nrmse(x, ref, mask), hfen(x, ref, mask, h), ssim(x, ref, mask, s), mask.count()};
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j;
    // JSON has no infinity
    j["psnr_db"] = std::isinf(r.psnr_db) ? nlohmann::json("inf") : nlohmann::json(r.psnr_db);
    j["nrmse_percent"] = r.nrmse_percent;
    j["hfen_percent"] = r.hfen_percent;
    j["ssim"] = r.ssim;
    j["mask_voxels"] = r.mask_voxels;
    return j;
}

struct RoiStats {
    int label = 0;
    std::size_t voxels = 0;
    double test_mean = 0.0, test_std = 0.0;
    double ref_mean = 0.0, ref_std = 0.0;
};

struct RoiReport {
    std::vector<RoiStats> rois;
    std::optional<RegressionResult> regression; ///< test means against reference means; needs 2+ distinct ROIs
};

/// Per-label statistics (label 0 is background) and the regression of test
/// ROI means on reference ROI means.
inline RoiReport roi_report(const Volume3D& test, const Volume3D& ref, const Volume3D& labels,
                            const Mask3D* mask = nullptr) {
    require_same_grid(test, ref, "roi_report");
    require(labels.dims() == test.dims(), ErrorCode::GridMismatch, "label map dims differ");
    if (mask) require_mask(test, *mask, "roi_report");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int l = static_cast<int>(std::lround(labels[i]));
        if (l != 0 && (!mask || (*mask)[i])) members[l].push_back(i);
    }
    require(!members.empty(), ErrorCode::NoLabels, "label map has no nonzero labels");
    RoiReport rep;
    std::vector<double> xs, ys;
    for (const auto& [label, idx] : members) {
        RoiStats s{label, idx.size()};
        for (auto i : idx) {
            s.test_mean += test[i];
            s.ref_mean += ref[i];
        }
        const double n = static_cast<double>(idx.size());
        s.test_mean /= n;
        s.ref_mean /= n;
        for (auto i : idx) {
            s.test_std += (test[i] - s.test_mean) * (test[i] - s.test_mean);
            s.ref_std += (ref[i] - s.ref_mean) * (ref[i] - s.ref_mean);
        }
        s.test_std = std::sqrt(s.test_std / n);
        s.ref_std = std::sqrt(s.ref_std / n);
        xs.push_back(s.ref_mean);
        ys.push_back(s.test_mean);
        rep.rois.push_back(s);
    }
    try {
        rep.regression = linear_regression(xs, ys);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateX) throw;
    }
    return rep;
}

inline nlohmann::json to_json(const RoiReport& r) {
    nlohmann::json j;
    j["rois"] = nlohmann::json::array();
    for (const auto& s : r.rois)
        j["rois"].push_back({{"label", s.label},
                             {"voxels", s.voxels},
                             {"test_mean", s.test_mean},
                             {"test_std", s.test_std},
                             {"ref_mean", s.ref_mean},
                             {"ref_std", s.ref_std}});
    if (r.regression)
        j["regression"] = {{"slope", r.regression->slope},
                           {"intercept", r.regression->intercept},
                           {"r_squared", r.regression->r_squared},
                           {"n_points", r.regression->n_points}};
    else
        j["regression"] = nullptr;
    return j;
}

inline std::string roi_csv(const RoiReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "label,voxels,test_mean,test_std,ref_mean,ref_std\n";
    for (const auto& s : r.rois)
        os << s.label << ',' << s.voxels << ',' << s.test_mean << ',' << s.test_std << ',' << s.ref_mean << ','
           << s.ref_std << '\n';
    return os.str();
}

} // namespace chisep
