#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "chisep/dipole.hpp"
#include "chisep/series.hpp"
#include "chisep/volume.hpp"

namespace chisep {

enum class Shape { sphere, ellipsoid, cylinder };
enum class Tissue { brain, csf, vessel };

struct Primitive {
    Shape shape = Shape::sphere;
    Vec3 center{};           ///< voxel coordinates; voxel centres sit on integers
    Vec3 radii{1.0, 1.0, 1.0}; ///< sphere uses radii[0]; cylinder uses radii[0] as its radius
    double half_length = 0.0; ///< cylinder only
    Axis axis = Axis::z;      ///< cylinder only
    double chi_para = 0.0;    ///< ppm, >= 0
    double chi_dia = 0.0;     ///< ppm, >= 0 (magnitude of the diamagnetic source)
    double r2 = 0.0;          ///< 1/s
    double m0 = 1.0;
    int label = 0;
    Tissue tissue = Tissue::brain;

    bool contains(double x, double y, double z) const {
        const double dx = x - center[0], dy = y - center[1], dz = z - center[2];
        switch (shape) {
        case Shape::sphere: return dx * dx + dy * dy + dz * dz <= radii[0] * radii[0];
        case Shape::ellipsoid: {
            const double a = dx / radii[0], b = dy / radii[1], c = dz / radii[2];
            return a * a + b * b + c * c <= 1.0;
        }
        case Shape::cylinder: {
            const double along = axis == Axis::x ? dx : axis == Axis::y ? dy : dz;
            const double r2sum = dx * dx + dy * dy + dz * dz - along * along;
            return std::abs(along) <= half_length && r2sum <= radii[0] * radii[0];
        }
        }
        return false;
    }

    /// Axis-aligned half extents.
    Vec3 half_extent() const {
        switch (shape) {
        case Shape::sphere: return {radii[0], radii[0], radii[0]};
        case Shape::ellipsoid: return radii;
        case Shape::cylinder: {
            Vec3 e{radii[0], radii[0], radii[0]};
            e[static_cast<int>(axis)] = half_length;
            return e;
        }
        }
        return radii;
    }
};

struct PhantomSpec {
    Dims dims{32, 32, 32};
    Vec3 voxel_size{1.0, 1.0, 1.0};
    Vec3 b0_dir{0.0, 0.0, 1.0};
    double dr_true = 114.0; ///< Hz/ppm
    std::uint64_t seed = 0;
    double margin_fraction = 0.125; ///< empty margin per side, fraction of each axis
    double jitter = 0.0;            ///< relative per-voxel susceptibility perturbation, seeded
    bool zero_mean_total = false;   ///< rebalance primitive 0 so that sum(chi_para - chi_dia) = 0
    /// Signal outside every primitive (a chi = 0 water bath). With the
    /// default 0 the margin is signal-free and its field cannot be measured.
    double background_m0 = 0.0;
    double background_r2 = 0.0;
    std::vector<Primitive> primitives;
};

struct Phantom {
    Volume3D chi_para;
    Volume3D chi_dia;
    Volume3D r2;
    Volume3D m0;
    Mask3D brain_mask;
    Mask3D csf_mask;
    Mask3D vessel_mask;
    Volume3D roi_labels;
    double dr_true = 114.0;

    const Dims& dims() const { return chi_para.dims(); }

    /// chi_para - chi_dia, the bulk susceptibility seen by the field.
    Volume3D chi_total() const {
        std::vector<double> v(chi_para.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = chi_para[i] - chi_dia[i];
        return chi_para.with_data(std::move(v));
    }

    Mask3D roi_mask(const std::vector<int>& labels) const {
        Mask3D m(dims());
        for (std::size_t i = 0; i < m.data.size(); ++i)
            for (int l : labels)
                if (static_cast<int>(roi_labels[i]) == l && l != 0) m.data[i] = 1;
        return m;
    }
};

// --- JSON ----------------------------------------------------------------

namespace detail {

inline Vec3 vec3_from_json(const nlohmann::json& j, const char* what) {
    require(j.is_array() && j.size() == 3, ErrorCode::BadSpec, std::string(what) + " must be a 3-element array");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Shape shape_from_string(const std::string& s) {
    if (s == "sphere") return Shape::sphere;
    if (s == "ellipsoid") return Shape::ellipsoid;
    if (s == "cylinder") return Shape::cylinder;
    fail(ErrorCode::BadSpec, "unknown primitive shape '" + s + "'");
}

inline Tissue tissue_from_string(const std::string& s) {
    if (s == "brain") return Tissue::brain;
    if (s == "csf") return Tissue::csf;
    if (s == "vessel") return Tissue::vessel;
    fail(ErrorCode::BadSpec, "unknown tissue '" + s + "'");
}

inline const char* to_string(Shape s) {
    return s == Shape::sphere ? "sphere" : s == Shape::ellipsoid ? "ellipsoid" : "cylinder";
}
inline const char* to_string(Tissue t) { return t == Tissue::brain ? "brain" : t == Tissue::csf ? "csf" : "vessel"; }
inline const char* axis_name(Axis a) { return a == Axis::x ? "x" : a == Axis::y ? "y" : "z"; }

} // namespace detail

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    try {
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            const Vec3 d = detail::vec3_from_json(g.at("dims"), "grid.dims");
            for (double v : d) require(v >= 2 && v == std::floor(v), ErrorCode::BadSpec, "grid dims must be integers >= 2");
            s.dims = {static_cast<std::size_t>(d[0]), static_cast<std::size_t>(d[1]), static_cast<std::size_t>(d[2])};
            if (g.contains("voxel_size")) s.voxel_size = detail::vec3_from_json(g.at("voxel_size"), "grid.voxel_size");
        }
        if (j.contains("b0_dir")) s.b0_dir = normalized(detail::vec3_from_json(j.at("b0_dir"), "b0_dir"));
        s.dr_true = j.value("dr_true", s.dr_true);
        s.seed = j.value("seed", s.seed);
        s.margin_fraction = j.value("margin_fraction", s.margin_fraction);
        s.jitter = j.value("jitter", s.jitter);
        s.zero_mean_total = j.value("zero_mean_total", s.zero_mean_total);
        if (j.contains("background")) {
            s.background_m0 = j.at("background").value("m0", 0.0);
            s.background_r2 = j.at("background").value("r2", 0.0);
        }
        for (const auto& pj : j.value("primitives", nlohmann::json::array())) {
            Primitive p;
            p.shape = detail::shape_from_string(pj.at("shape").get<std::string>());
            p.center = detail::vec3_from_json(pj.at("center"), "center");
            if (p.shape == Shape::ellipsoid) {
                p.radii = detail::vec3_from_json(pj.at("radii"), "radii");
            } else {
                const double r = pj.at("radius").get<double>();
                p.radii = {r, r, r};
            }
            if (p.shape == Shape::cylinder) {
                p.half_length = pj.at("half_length").get<double>();
                const std::string ax = pj.value("axis", std::string("z"));
                require(ax == "x" || ax == "y" || ax == "z", ErrorCode::BadSpec, "cylinder axis must be x, y or z");
                p.axis = ax == "x" ? Axis::x : ax == "y" ? Axis::y : Axis::z;
            }
            p.chi_para = pj.value("chi_para", 0.0);
            p.chi_dia = pj.value("chi_dia", 0.0);
            p.r2 = pj.value("r2", 0.0);
            p.m0 = pj.value("m0", 1.0);
            p.label = pj.value("label", 0);
            p.tissue = detail::tissue_from_string(pj.value("tissue", std::string("brain")));
            s.primitives.push_back(p);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::BadSpec, e.what());
    }
    return s;
}

inline nlohmann::json to_json(const PhantomSpec& s) {
    nlohmann::json j;
    j["grid"] = {{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}}, {"voxel_size", s.voxel_size}};
    j["b0_dir"] = s.b0_dir;
    j["dr_true"] = s.dr_true;
    j["seed"] = s.seed;
    j["margin_fraction"] = s.margin_fraction;
    j["jitter"] = s.jitter;
    j["zero_mean_total"] = s.zero_mean_total;
    j["background"] = {{"m0", s.background_m0}, {"r2", s.background_r2}};
    j["primitives"] = nlohmann::json::array();
    for (const auto& p : s.primitives) {
        nlohmann::json pj{{"shape", detail::to_string(p.shape)},
                          {"center", p.center},
                          {"chi_para", p.chi_para},
                          {"chi_dia", p.chi_dia},
                          {"r2", p.r2},
                          {"m0", p.m0},
                          {"label", p.label},
                          {"tissue", detail::to_string(p.tissue)}};
        if (p.shape == Shape::ellipsoid)
            pj["radii"] = p.radii;
        else
            pj["radius"] = p.radii[0];
        if (p.shape == Shape::cylinder) {
            pj["half_length"] = p.half_length;
            pj["axis"] = detail::axis_name(p.axis);
        }
        j["primitives"].push_back(pj);
    }
    return j;
}

// --- generation ----------------------------------------------------------

inline Phantom generate_phantom(const PhantomSpec& spec) {
    const Dims d = spec.dims;
    require(spec.margin_fraction >= 0.0 && spec.margin_fraction < 0.5, ErrorCode::BadSpec,
            "margin_fraction must lie in [0, 0.5)");
    require(spec.jitter >= 0.0 && spec.jitter < 1.0, ErrorCode::BadSpec, "jitter must lie in [0, 1)");
    require(spec.background_m0 >= 0.0 && spec.background_r2 >= 0.0, ErrorCode::BadSpec,
            "background m0 and r2 must be >= 0");
    for (std::size_t pi = 0; pi < spec.primitives.size(); ++pi) {
        const Primitive& p = spec.primitives[pi];
        require(p.chi_para >= 0.0 && p.chi_dia >= 0.0 && p.r2 >= 0.0 && p.m0 >= 0.0, ErrorCode::BadSpec,
                "primitive " + std::to_string(pi) + " has negative physical values");
        const Vec3 e = p.half_extent();
        for (int a = 0; a < 3; ++a) {
            require(e[a] > 0.0, ErrorCode::BadSpec, "primitive " + std::to_string(pi) + " has non-positive size");
            const double lo = spec.margin_fraction * static_cast<double>(d[a]);
            const double hi = (1.0 - spec.margin_fraction) * static_cast<double>(d[a]) - 1.0;
            if (p.center[a] - e[a] < lo - 1e-9 || p.center[a] + e[a] > hi + 1e-9)
                fail(ErrorCode::PrimitiveOutOfBounds,
                     "primitive " + std::to_string(pi) + " leaves the interior region along axis " +
                         std::to_string(a));
        }
    }

    const Vec3 vs = spec.voxel_size, b0 = spec.b0_dir;
    Phantom ph{Volume3D(d, vs, Unit::ppm, b0),      Volume3D(d, vs, Unit::ppm, b0),
               Volume3D(d, vs, Unit::per_second, b0), Volume3D(d, vs, Unit::dimensionless, b0),
               Mask3D(d),                            Mask3D(d),
               Mask3D(d),                            Volume3D(d, vs, Unit::dimensionless, b0),
               spec.dr_true};
    std::vector<int> owner(d.size(), -1);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = ph.chi_para.index(x, y, z);
                for (std::size_t pi = 0; pi < spec.primitives.size(); ++pi)
                    if (spec.primitives[pi].contains(static_cast<double>(x), static_cast<double>(y),
                                                     static_cast<double>(z)))
                        owner[i] = static_cast<int>(pi);
            }

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (owner[i] < 0) {
            ph.m0[i] = spec.background_m0;
            ph.r2[i] = spec.background_r2;
            continue;
        }
        const Primitive& p = spec.primitives[static_cast<std::size_t>(owner[i])];
        double fp = 1.0, fd = 1.0;
        if (spec.jitter > 0.0) {
            fp += spec.jitter * unit(rng);
            fd += spec.jitter * unit(rng);
        }
        ph.chi_para[i] = p.chi_para * fp;
        ph.chi_dia[i] = p.chi_dia * fd;
        ph.r2[i] = p.r2;
        ph.m0[i] = p.m0;
        ph.roi_labels[i] = p.label;
        ph.brain_mask.data[i] = 1;
        ph.csf_mask.data[i] = p.tissue == Tissue::csf ? 1 : 0;
        ph.vessel_mask.data[i] = p.tissue == Tissue::vessel ? 1 : 0;
    }

    if (spec.zero_mean_total && !spec.primitives.empty()) {
        double total = 0.0;
        std::size_t n0 = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            total += ph.chi_para[i] - ph.chi_dia[i];
            if (owner[i] == 0) ++n0;
        }
        require(n0 > 0, ErrorCode::BadSpec, "primitive 0 owns no voxels; cannot rebalance");
        const double shift = total / static_cast<double>(n0);
        for (std::size_t i = 0; i < d.size(); ++i)
            if (owner[i] == 0) (shift > 0.0 ? ph.chi_dia[i] : ph.chi_para[i]) += std::abs(shift);
    }
    return ph;
}

inline Phantom generate_phantom(PhantomSpec spec, std::uint64_t seed) {
    spec.seed = seed;
    return generate_phantom(spec);
}

/// Layout loosely following a brain: a tissue ellipsoid, two diamagnetic
/// white-matter-like lobes, a CSF ventricle, five paramagnetic deep-nucleus
/// ROIs (labels 4-8, no diamagnetic content) and a vessel, in a water bath
/// so the field is measurable over the whole grid. All coordinates scale
/// with n; n >= 16.
inline PhantomSpec brain_like_spec(std::size_t n = 32, double dr_true = 114.0) {
    require(n >= 16, ErrorCode::BadSpec, "brain_like_spec needs n >= 16");
    const double s = static_cast<double>(n) / 32.0;
    const double c = (static_cast<double>(n) - 1.0) / 2.0;
    auto at = [&](double dx, double dy, double dz) { return Vec3{c + dx * s, c + dy * s, c + dz * s}; };
    PhantomSpec spec;
    spec.dims = {n, n, n};
    spec.dr_true = dr_true;
    spec.zero_mean_total = true;
    spec.background_m0 = 1.0;
    spec.background_r2 = 2.0;

    auto ellipsoid = [&](Vec3 ctr, Vec3 r, double para, double dia, double r2, int label, Tissue t) {
        Primitive p;
        p.shape = Shape::ellipsoid;
        p.center = ctr;
        p.radii = {r[0] * s, r[1] * s, r[2] * s};
        p.chi_para = para;
        p.chi_dia = dia;
        p.r2 = r2;
        p.label = label;
        p.tissue = t;
        return p;
    };
    auto sphere = [&](Vec3 ctr, double r, double para, int label) {
        Primitive p;
        p.center = ctr;
        p.radii = {r * s, r * s, r * s};
        p.chi_para = para;
        p.r2 = 15.0;
        p.label = label;
        return p;
    };
    spec.primitives.push_back(ellipsoid(at(0, 0, 0), {11.0, 11.0, 10.0}, 0.02, 0.025, 15.0, 1, Tissue::brain));
    spec.primitives.push_back(ellipsoid(at(-5, 2, 1), {3.0, 5.0, 3.0}, 0.01, 0.06, 15.0, 2, Tissue::brain));
    spec.primitives.push_back(ellipsoid(at(5, 2, 1), {3.0, 5.0, 3.0}, 0.01, 0.05, 15.0, 3, Tissue::brain));
    spec.primitives.push_back(ellipsoid(at(0, -1, 0), {1.5, 3.0, 2.0}, 0.0, 0.0, 2.0, 0, Tissue::csf));
    spec.primitives.push_back(sphere(at(-3, -5, -2), 1.8, 0.06, 4));
    spec.primitives.push_back(sphere(at(3, -5, -2), 1.8, 0.09, 5));
    spec.primitives.push_back(sphere(at(-4, -1, -4), 1.8, 0.12, 6));
    spec.primitives.push_back(sphere(at(2, -1, -5), 1.5, 0.10, 7));
    spec.primitives.push_back(sphere(at(0, 4, -5), 1.5, 0.14, 8));
    Primitive vessel;
    vessel.shape = Shape::cylinder;
    vessel.center = at(7, -4, 0);
    vessel.radii = {0.8 * s, 0.8 * s, 0.8 * s};
    vessel.half_length = 6.0 * s;
    vessel.chi_para = 0.15;
    vessel.r2 = 15.0;
    vessel.tissue = Tissue::vessel;
    spec.primitives.push_back(vessel);
    return spec;
}

// --- forward models --------------------------------------------------------

/// Local field (ppm) of chi_para - chi_dia for the kernel's orientation.
inline Volume3D true_field(const Phantom& ph, const DipoleKernel& kernel) {
    Volume3D chi = ph.chi_total();
    require(chi.dims() == kernel.dims, ErrorCode::GridMismatch,
            "phantom grid " + chi.dims().str() + " vs kernel " + kernel.dims.str());
    for (int a = 0; a < 3; ++a)
        require(std::abs(chi.voxel_size()[a] - kernel.voxel_size[a]) <= 1e-9, ErrorCode::GridMismatch,
                "phantom voxel size differs from kernel");
    return forward_field(chi.with_b0(kernel.b0_dir), kernel);
}

/// R2' = D_r (chi_para + chi_dia), in 1/s.
inline Volume3D true_r2prime(const Phantom& ph) {
    std::vector<double> v(ph.chi_para.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ph.dr_true * (ph.chi_para[i] + ph.chi_dia[i]);
    return ph.chi_para.with_data(std::move(v)).with_unit(Unit::per_second);
}

namespace detail {

inline void validate_echo_times(std::span<const double> tes) {
    require(!tes.empty(), ErrorCode::BadEchoTimes, "no echo times");
    for (std::size_t e = 0; e < tes.size(); ++e) {
        require(std::isfinite(tes[e]) && tes[e] >= 0.0, ErrorCode::BadEchoTimes, "echo times must be >= 0");
        if (e > 0) require(tes[e] > tes[e - 1], ErrorCode::BadEchoTimes, "echo times must be strictly increasing");
    }
}

inline double wrap_phase(double p) {
    const double w = std::remainder(p, 2.0 * std::numbers::pi);
    return w <= -std::numbers::pi ? w + 2.0 * std::numbers::pi : w;
}

inline double noise_sigma(const Phantom& ph, double snr) {
    require(snr > 0.0, ErrorCode::InvalidArgument, "snr must be positive or infinite");
    if (std::isinf(snr)) return 0.0;
    double peak = 0.0;
    for (double v : ph.m0.data()) peak = std::max(peak, v);
    return peak / snr;
}

} // namespace detail

/// Multi-echo gradient-echo magnitude and wrapped phase. Noise, when snr is
/// finite, is complex Gaussian with sigma = max(m0) / snr.
inline MultiEchoSeries synthesize_gre(const Phantom& ph, const DipoleKernel& kernel, std::span<const double> echo_times,
                                      double b0_tesla, double snr = std::numeric_limits<double>::infinity(),
                                      std::uint64_t seed = 0) {
    detail::validate_echo_times(echo_times);
    require(b0_tesla > 0.0, ErrorCode::BadB0, "field strength must be positive");
    const double sigma = detail::noise_sigma(ph, snr);
    const Volume3D field_ppm = true_field(ph, kernel);
    const Volume3D r2p = true_r2prime(ph);
    const double hz_per_ppm = b0_tesla * kGammaBarHzPerTesla * 1e-6;

    MultiEchoSeries s;
    s.echo_times.assign(echo_times.begin(), echo_times.end());
    s.b0_tesla = b0_tesla;
    s.wrapped = true;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Volume3D templ = ph.m0.with_b0(kernel.b0_dir).with_unit(Unit::dimensionless);
    for (double te : echo_times) {
        std::vector<double> mag(templ.size()), pha(templ.size());
        for (std::size_t i = 0; i < templ.size(); ++i) {
            const double f_hz = field_ppm[i] * hz_per_ppm;
            const double amp = ph.m0[i] * std::exp(-(ph.r2[i] + r2p[i]) * te);
            std::complex<double> sig = std::polar(amp, 2.0 * std::numbers::pi * f_hz * te);
            if (sigma > 0.0) sig += std::complex<double>(sigma * gauss(rng), sigma * gauss(rng));
            mag[i] = std::abs(sig);
            pha[i] = detail::wrap_phase(std::arg(sig));
        }
        s.magnitude.push_back(templ.with_data(std::move(mag)));
        s.phase.push_back(templ.with_data(std::move(pha)));
    }
    return s;
}

/// Ideal spin-echo magnitudes m0 exp(-r2 TE) (B1 assumed perfect).
inline MultiEchoSeries synthesize_se(const Phantom& ph, std::span<const double> echo_times,
                                     double snr = std::numeric_limits<double>::infinity(), std::uint64_t seed = 0) {
    detail::validate_echo_times(echo_times);
    const double sigma = detail::noise_sigma(ph, snr);
    MultiEchoSeries s;
    s.echo_times.assign(echo_times.begin(), echo_times.end());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Volume3D templ = ph.m0.with_unit(Unit::dimensionless);
    for (double te : echo_times) {
        std::vector<double> mag(templ.size());
        for (std::size_t i = 0; i < templ.size(); ++i) {
            std::complex<double> sig(ph.m0[i] * std::exp(-ph.r2[i] * te), 0.0);
            if (sigma > 0.0) sig += std::complex<double>(sigma * gauss(rng), sigma * gauss(rng));
            mag[i] = std::abs(sig);
        }
        s.magnitude.push_back(templ.with_data(std::move(mag)));
    }
    return s;
}

/// Echo times of the multi-echo GRE protocol (s): 7.70 ms + 5.03 ms steps.
inline std::vector<double> default_gre_echo_times() {
    return {0.00770, 0.01273, 0.01776, 0.02279, 0.02782, 0.03285};
}

/// Echo times of the multi-echo SE protocol (s): 15 ms to 90 ms.
inline std::vector<double> default_se_echo_times() { return {0.015, 0.030, 0.045, 0.060, 0.075, 0.090}; }

} // namespace chisep
