#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chisep/error.hpp"

namespace chisep {

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    require(n > 0.0, ErrorCode::BadB0, "zero-length direction");
    return {a[0] / n, a[1] / n, a[2] / n};
}

inline bool is_unit(const Vec3& a, double tol = 1e-9) { return std::abs(norm(a) - 1.0) <= tol; }

struct Dims {
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::size_t nz = 0;

    std::size_t size() const { return nx * ny * nz; }
    std::size_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
    bool operator==(const Dims&) const = default;

    std::string str() const {
        return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
    }
};

enum class Axis { x = 0, y = 1, z = 2 };

enum class Unit { ppm, hertz, per_second, dimensionless };

inline std::string_view to_string(Unit u) {
    switch (u) {
    case Unit::ppm: return "ppm";
    case Unit::hertz: return "hertz";
    case Unit::per_second: return "per_second";
    case Unit::dimensionless: return "dimensionless";
    }
    return "dimensionless";
}

inline Unit unit_from_string(std::string_view s) {
    if (s == "ppm") return Unit::ppm;
    if (s == "hertz") return Unit::hertz;
    if (s == "per_second") return Unit::per_second;
    if (s == "dimensionless") return Unit::dimensionless;
    fail(ErrorCode::InvalidArgument, "unknown unit '" + std::string(s) + "'");
}

/// Scalar field on a regular grid. Index order is x fastest, z slowest.
class Volume3D {
public:
    Volume3D() = default;

    explicit Volume3D(Dims dims, Vec3 voxel_size = {1.0, 1.0, 1.0}, Unit unit = Unit::dimensionless,
                      Vec3 b0_dir = {0.0, 0.0, 1.0})
        : Volume3D(dims, std::vector<double>(dims.size(), 0.0), voxel_size, unit, b0_dir) {}

    Volume3D(Dims dims, std::vector<double> data, Vec3 voxel_size = {1.0, 1.0, 1.0},
             Unit unit = Unit::dimensionless, Vec3 b0_dir = {0.0, 0.0, 1.0})
        : dims_(dims), voxel_size_(voxel_size), unit_(unit), b0_dir_(b0_dir), data_(std::move(data)) {
        require(dims.nx > 0 && dims.ny > 0 && dims.nz > 0, ErrorCode::InvalidArgument,
                "volume dims must be positive, got " + dims.str());
        require(data_.size() == dims.size(), ErrorCode::ShapeMismatch,
                "data length " + std::to_string(data_.size()) + " does not match dims " + dims.str());
        for (double v : voxel_size_)
            require(v > 0.0 && std::isfinite(v), ErrorCode::InvalidArgument, "voxel size must be positive");
        require(is_unit(b0_dir_), ErrorCode::BadB0, "b0 direction must be a unit vector");
        for (double v : data_)
            require(std::isfinite(v), ErrorCode::InvalidArgument, "volume contains non-finite values");
    }

    const Dims& dims() const { return dims_; }
    const Vec3& voxel_size() const { return voxel_size_; }
    Unit unit() const { return unit_; }
    const Vec3& b0_dir() const { return b0_dir_; }
    std::size_t size() const { return data_.size(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + dims_.nx * (y + dims_.ny * z);
    }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }
    double& at(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }

    /// Same grid and metadata, new values.
    Volume3D with_data(std::vector<double> data) const {
        return Volume3D(dims_, std::move(data), voxel_size_, unit_, b0_dir_);
    }
    Volume3D with_unit(Unit unit) const {
        Volume3D v = *this;
        v.unit_ = unit;
        return v;
    }
    Volume3D with_b0(const Vec3& b0) const {
        require(is_unit(b0), ErrorCode::BadB0, "b0 direction must be a unit vector");
        Volume3D v = *this;
        v.b0_dir_ = b0;
        return v;
    }

private:
    Dims dims_{};
    Vec3 voxel_size_{1.0, 1.0, 1.0};
    Unit unit_ = Unit::dimensionless;
    Vec3 b0_dir_{0.0, 0.0, 1.0};
    std::vector<double> data_;
};

struct Mask3D {
    Dims dims{};
    std::vector<std::uint8_t> data;

    Mask3D() = default;
    explicit Mask3D(Dims d, bool value = false) : dims(d), data(d.size(), value ? 1 : 0) {}
    Mask3D(Dims d, std::vector<std::uint8_t> values) : dims(d), data(std::move(values)) {
        require(data.size() == dims.size(), ErrorCode::ShapeMismatch, "mask length does not match dims");
    }

    static Mask3D full(Dims d) { return Mask3D(d, true); }

    /// Nonzero voxels of a volume.
    static Mask3D from_volume(const Volume3D& v) {
        Mask3D m(v.dims());
        for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = v[i] != 0.0 ? 1 : 0;
        return m;
    }

    bool operator[](std::size_t i) const { return data[i] != 0; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1)); }
    bool empty() const { return count() == 0; }

    Volume3D to_volume(Vec3 voxel_size = {1.0, 1.0, 1.0}) const {
        std::vector<double> v(data.begin(), data.end());
        return Volume3D(dims, std::move(v), voxel_size);
    }
};

inline bool same_grid(const Volume3D& a, const Volume3D& b, double tol = 1e-9) {
    if (!(a.dims() == b.dims())) return false;
    for (int i = 0; i < 3; ++i)
        if (std::abs(a.voxel_size()[i] - b.voxel_size()[i]) > tol) return false;
    return true;
}

inline void require_same_grid(const Volume3D& a, const Volume3D& b, std::string_view what) {
    require(same_grid(a, b), ErrorCode::GridMismatch,
            std::string(what) + ": grid " + a.dims().str() + " vs " + b.dims().str());
}

inline void require_mask(const Volume3D& v, const Mask3D& m, std::string_view what) {
    require(v.dims() == m.dims, ErrorCode::GridMismatch,
            std::string(what) + ": mask grid " + m.dims.str() + " vs volume " + v.dims().str());
}

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
    Unit unit = Unit::dimensionless; ///< unit restored by denormalize
};

struct RegressionResult {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::size_t n_points = 0;
};

/// In-mask mean and population standard deviation.
inline NormStats masked_stats(const Volume3D& vol, const Mask3D& mask) {
    require_mask(vol, mask, "masked_stats");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < vol.size(); ++i)
        if (mask[i]) {
            sum += vol[i];
            ++n;
        }
    require(n > 0, ErrorCode::DegenerateStats, "empty mask");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < vol.size(); ++i)
        if (mask[i]) ss += (vol[i] - mean) * (vol[i] - mean);
    return {mean, std::sqrt(ss / static_cast<double>(n)), vol.unit()};
}

/// Applies (v - mean) / std with the given stats. Output is dimensionless.
inline Volume3D apply_normalization(const Volume3D& vol, const NormStats& stats) {
    require(stats.std > 0.0, ErrorCode::DegenerateStats, "std must be positive");
    std::vector<double> out(vol.size());
    for (std::size_t i = 0; i < vol.size(); ++i) out[i] = (vol[i] - stats.mean) / stats.std;
    return vol.with_data(std::move(out)).with_unit(Unit::dimensionless);
}

inline std::pair<Volume3D, NormStats> normalize(const Volume3D& vol, const Mask3D& mask) {
    NormStats stats = masked_stats(vol, mask);
    require(stats.std > 1e-12, ErrorCode::DegenerateStats,
            "in-mask standard deviation is " + std::to_string(stats.std));
    return {apply_normalization(vol, stats), stats};
}

inline Volume3D denormalize(const Volume3D& vol, const NormStats& stats) {
    require(stats.std > 0.0, ErrorCode::DegenerateStats, "std must be positive");
    std::vector<double> out(vol.size());
    for (std::size_t i = 0; i < vol.size(); ++i) out[i] = vol[i] * stats.std + stats.mean;
    return vol.with_data(std::move(out)).with_unit(stats.unit);
}

/// Forward difference along an axis; the last plane is zero.
inline Volume3D finite_gradient(const Volume3D& vol, Axis axis) {
    const Dims d = vol.dims();
    const auto a = static_cast<int>(axis);
    require(d[a] >= 2, ErrorCode::AxisTooShort, "axis length " + std::to_string(d[a]) + " < 2");
    const std::size_t stride = a == 0 ? 1 : a == 1 ? d.nx : d.nx * d.ny;
    std::vector<double> g(vol.size(), 0.0);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t pos = a == 0 ? x : a == 1 ? y : z;
                if (pos + 1 == d[a]) continue;
                const std::size_t i = vol.index(x, y, z);
                g[i] = vol[i + stride] - vol[i];
            }
    return vol.with_data(std::move(g));
}

/// Ordinary least squares y = slope * x + intercept.
inline RegressionResult linear_regression(std::span<const double> xs, std::span<const double> ys) {
    require(xs.size() == ys.size(), ErrorCode::ShapeMismatch, "xs and ys differ in length");
    const std::size_t n = xs.size();
    require(n >= 2, ErrorCode::DegenerateX, "need at least two points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    require(sxx / static_cast<double>(n) > 1e-15, ErrorCode::DegenerateX, "x values have no variance");
    RegressionResult r;
    r.n_points = n;
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    if (syy > 0.0) {
        double ss_res = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = ys[i] - (r.slope * xs[i] + r.intercept);
            ss_res += e * e;
        }
        r.r_squared = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
    }
    return r;
}

} // namespace chisep
