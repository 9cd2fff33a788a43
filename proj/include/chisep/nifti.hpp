#pragma once

// Minimal single-file NIfTI-1 (.nii) reader/writer. float32 and float64 only,
// no compression. qform/sform are carried through but never interpreted.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "chisep/series.hpp"
#include "chisep/volume.hpp"

namespace chisep::nifti {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDefaultVoxOffset = 352;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;

struct NiftiHeader {
    std::int32_t sizeof_hdr = 348;
    std::array<std::int16_t, 8> dim{};
    std::int16_t datatype = kFloat32;
    std::int16_t bitpix = 32;
    std::array<float, 8> pixdim{};
    float vox_offset = static_cast<float>(kDefaultVoxOffset);
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
    std::uint8_t xyzt_units = 10; // mm + s
    float toffset = 0.0f;
    std::string descrip;
    std::int16_t qform_code = 0;
    std::int16_t sform_code = 0;
    // quatern_b/c/d, qoffset_x/y/z, srow_x[4], srow_y[4], srow_z[4]
    std::array<float, 18> transform{};
    std::array<char, 4> magic{'n', '+', '1', '\0'};
    bool big_endian = false; ///< byte order of the source file
};

struct NiftiImage {
    NiftiHeader header;
    std::variant<Volume3D, MultiEchoSeries> content;

    bool is_series() const { return std::holds_alternative<MultiEchoSeries>(content); }
};

namespace detail {

// Header field offsets.
inline constexpr std::size_t kOffDim = 40;
inline constexpr std::size_t kOffDatatype = 70;
inline constexpr std::size_t kOffBitpix = 72;
inline constexpr std::size_t kOffPixdim = 76;
inline constexpr std::size_t kOffVoxOffset = 108;
inline constexpr std::size_t kOffSclSlope = 112;
inline constexpr std::size_t kOffSclInter = 116;
inline constexpr std::size_t kOffXyztUnits = 123;
inline constexpr std::size_t kOffToffset = 136;
inline constexpr std::size_t kOffDescrip = 148;
inline constexpr std::size_t kOffQformCode = 252;
inline constexpr std::size_t kOffSformCode = 254;
inline constexpr std::size_t kOffTransform = 256;
inline constexpr std::size_t kOffMagic = 344;

template <typename T>
T load(std::span<const std::uint8_t> bytes, std::size_t off, bool swap) {
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes.data() + off, sizeof(T));
    if (swap) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
}

// Output is always little-endian.
template <typename T>
void store(std::vector<std::uint8_t>& bytes, std::size_t off, T value) {
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    std::memcpy(bytes.data() + off, raw.data(), sizeof(T));
}

inline constexpr bool kHostLittle = std::endian::native == std::endian::little;

struct Descrip {
    Unit unit = Unit::dimensionless;
    Vec3 b0{0.0, 0.0, 1.0};
    bool phase = false;
    std::optional<double> b0_tesla;
};

inline Descrip parse_descrip(const std::string& s) {
    Descrip d;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t end = s.find(';', pos);
        if (end == std::string::npos) end = s.size();
        const std::string item = s.substr(pos, end - pos);
        pos = end + 1;
        const auto eq = item.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
        if (key == "unit") {
            try {
                d.unit = unit_from_string(val);
            } catch (const Error&) {
                d.unit = Unit::dimensionless;
            }
        } else if (key == "b0") {
            Vec3 b{};
            if (std::sscanf(val.c_str(), "%lf,%lf,%lf", &b[0], &b[1], &b[2]) == 3 && norm(b) > 0.5 &&
                std::isfinite(norm(b)))
                d.b0 = normalized(b);
        } else if (key == "kind") {
            d.phase = val == "phase";
        } else if (key == "B0T") {
            double t = 0.0;
            if (std::sscanf(val.c_str(), "%lf", &t) == 1 && t > 0.0) d.b0_tesla = t;
        }
    }
    return d;
}

inline std::string format_descrip(Unit unit, const Vec3& b0, const std::string& extra) {
    char buf[128];
    for (int prec : {12, 9, 6}) {
        std::snprintf(buf, sizeof(buf), "unit=%s;b0=%.*g,%.*g,%.*g%s", std::string(to_string(unit)).c_str(),
                      prec, b0[0], prec, b0[1], prec, b0[2], extra.c_str());
        if (std::strlen(buf) < 80) return buf;
    }
    std::snprintf(buf, sizeof(buf), "unit=%s;b0=%.6g,%.6g,%.6g", std::string(to_string(unit)).c_str(), b0[0],
                  b0[1], b0[2]);
    return std::string(buf).substr(0, 79);
}

} // namespace detail

inline NiftiHeader parse_header(std::span<const std::uint8_t> bytes) {
    using namespace detail;
    require(bytes.size() >= kDefaultVoxOffset, ErrorCode::TruncatedData,
            "need at least 352 bytes, got " + std::to_string(bytes.size()));
    NiftiHeader h;
    const auto le = load<std::int32_t>(bytes, 0, !kHostLittle);
    bool swap = false;
    if (le == 348) {
        h.big_endian = false;
        swap = !kHostLittle;
    } else if (load<std::int32_t>(bytes, 0, kHostLittle) == 348) {
        h.big_endian = true;
        swap = kHostLittle;
    } else {
        fail(ErrorCode::BadHeader, "sizeof_hdr is not 348 in either byte order");
    }
    std::memcpy(h.magic.data(), bytes.data() + kOffMagic, 4);
    if (!(h.magic[0] == 'n' && h.magic[1] == '+' && h.magic[2] == '1' && h.magic[3] == '\0'))
        fail(ErrorCode::BadMagic, "magic is not \"n+1\\0\" (detached or non-NIfTI-1 file)");

    for (int i = 0; i < 8; ++i) h.dim[i] = load<std::int16_t>(bytes, kOffDim + 2 * i, swap);
    h.datatype = load<std::int16_t>(bytes, kOffDatatype, swap);
    h.bitpix = load<std::int16_t>(bytes, kOffBitpix, swap);
    for (int i = 0; i < 8; ++i) h.pixdim[i] = load<float>(bytes, kOffPixdim + 4 * i, swap);
    h.vox_offset = load<float>(bytes, kOffVoxOffset, swap);
    h.scl_slope = load<float>(bytes, kOffSclSlope, swap);
    h.scl_inter = load<float>(bytes, kOffSclInter, swap);
    h.xyzt_units = bytes[kOffXyztUnits];
    h.toffset = load<float>(bytes, kOffToffset, swap);
    const char* d = reinterpret_cast<const char*>(bytes.data() + kOffDescrip);
    h.descrip.assign(d, strnlen(d, 80));
    h.qform_code = load<std::int16_t>(bytes, kOffQformCode, swap);
    h.sform_code = load<std::int16_t>(bytes, kOffSformCode, swap);
    for (int i = 0; i < 18; ++i) h.transform[i] = load<float>(bytes, kOffTransform + 4 * i, swap);

    require(h.dim[0] == 3 || h.dim[0] == 4, ErrorCode::BadHeader,
            "dim[0] must be 3 or 4, got " + std::to_string(h.dim[0]));
    for (int i = 1; i <= h.dim[0]; ++i)
        require(h.dim[i] >= 1, ErrorCode::BadHeader, "dim[" + std::to_string(i) + "] must be positive");
    if (h.datatype != kFloat32 && h.datatype != kFloat64)
        fail(ErrorCode::UnsupportedDatatype, "datatype " + std::to_string(h.datatype));
    require(h.bitpix == (h.datatype == kFloat32 ? 32 : 64), ErrorCode::BadHeader, "bitpix disagrees with datatype");
    require(std::isfinite(h.vox_offset) && h.vox_offset >= 348.0f, ErrorCode::BadHeader, "vox_offset below 348");
    return h;
}

inline NiftiImage read_nifti(std::span<const std::uint8_t> bytes) {
    NiftiImage img{parse_header(bytes), Volume3D{}};
    const NiftiHeader& h = img.header;
    const bool swap = h.big_endian == detail::kHostLittle;

    const Dims dims{static_cast<std::size_t>(h.dim[1]), static_cast<std::size_t>(h.dim[2]),
                    static_cast<std::size_t>(h.dim[3])};
    const std::size_t frames = h.dim[0] == 4 ? static_cast<std::size_t>(h.dim[4]) : 1;
    const std::size_t width = h.datatype == kFloat32 ? 4 : 8;
    const auto offset = static_cast<std::uint64_t>(h.vox_offset);
    const std::uint64_t voxels = static_cast<std::uint64_t>(dims.size()) * frames;
    const std::uint64_t need = voxels * width;
    require(offset <= bytes.size() && need <= bytes.size() - offset, ErrorCode::TruncatedData,
            "header declares " + std::to_string(need) + " payload bytes at offset " + std::to_string(offset) +
                ", file has " + std::to_string(bytes.size()));

    double slope = h.scl_slope, inter = h.scl_inter;
    if (slope == 0.0 || !std::isfinite(slope)) slope = 1.0;
    if (!std::isfinite(inter)) inter = 0.0;

    Vec3 voxel{};
    for (int i = 0; i < 3; ++i) {
        const double p = std::abs(static_cast<double>(h.pixdim[i + 1]));
        voxel[i] = p > 0.0 && std::isfinite(p) ? p : 1.0;
    }
    const detail::Descrip meta = detail::parse_descrip(h.descrip);

    auto frame = [&](std::size_t f) {
        std::vector<double> data(dims.size());
        const std::size_t base = offset + f * dims.size() * width;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double raw = width == 4 ? static_cast<double>(detail::load<float>(bytes, base + 4 * i, swap))
                                          : detail::load<double>(bytes, base + 8 * i, swap);
            // identity scaling is skipped so float64 data round-trips exactly
            data[i] = (slope == 1.0 && inter == 0.0) ? raw : raw * slope + inter;
        }
        return Volume3D(dims, std::move(data), voxel, meta.unit, meta.b0);
    };

    if (frames == 1 && h.dim[0] == 3) {
        img.content = frame(0);
        return img;
    }
    MultiEchoSeries s;
    const double spacing = h.pixdim[4];
    for (std::size_t f = 0; f < frames; ++f) {
        s.echo_times.push_back(spacing > 0.0f ? static_cast<double>(h.toffset) + static_cast<double>(f) * spacing
                                              : static_cast<double>(f + 1));
        (meta.phase ? s.phase : s.magnitude).push_back(frame(f));
    }
    if (meta.phase) s.magnitude.assign(s.phase.size(), Volume3D(dims, voxel, Unit::dimensionless, meta.b0));
    s.wrapped = meta.phase;
    if (meta.b0_tesla) s.b0_tesla = *meta.b0_tesla;
    img.content = std::move(s);
    return img;
}

namespace detail {

inline std::vector<std::uint8_t> write_frames(std::span<const Volume3D> frames, int datatype,
                                              const std::optional<NiftiHeader>& passthrough,
                                              double toffset, double spacing, const std::string& extra) {
    if (datatype != kFloat32 && datatype != kFloat64)
        fail(ErrorCode::UnsupportedDatatype, "datatype " + std::to_string(datatype));
    require(!frames.empty(), ErrorCode::InvalidArgument, "nothing to write");
    const Volume3D& first = frames.front();
    const Dims d = first.dims();
    for (const auto& f : frames) require_same_grid(f, first, "write_nifti frames");
    require(d.nx <= 32767 && d.ny <= 32767 && d.nz <= 32767 && frames.size() <= 32767, ErrorCode::TooLarge,
            "dimension exceeds NIfTI-1 int16 range");
    const std::size_t width = datatype == kFloat32 ? 4 : 8;
    std::vector<std::uint8_t> out(kDefaultVoxOffset + d.size() * frames.size() * width, 0);

    store<std::int32_t>(out, 0, 348);
    const bool four_d = frames.size() > 1;
    const std::array<std::int16_t, 8> dim{static_cast<std::int16_t>(four_d ? 4 : 3),
                                          static_cast<std::int16_t>(d.nx),
                                          static_cast<std::int16_t>(d.ny),
                                          static_cast<std::int16_t>(d.nz),
                                          static_cast<std::int16_t>(frames.size()),
                                          1,
                                          1,
                                          1};
    for (int i = 0; i < 8; ++i) store<std::int16_t>(out, kOffDim + 2 * i, dim[i]);
    store<std::int16_t>(out, kOffDatatype, static_cast<std::int16_t>(datatype));
    store<std::int16_t>(out, kOffBitpix, static_cast<std::int16_t>(width * 8));
    const std::array<float, 8> pixdim{1.0f,
                                      static_cast<float>(first.voxel_size()[0]),
                                      static_cast<float>(first.voxel_size()[1]),
                                      static_cast<float>(first.voxel_size()[2]),
                                      static_cast<float>(four_d ? spacing : 0.0),
                                      0.0f,
                                      0.0f,
                                      0.0f};
    for (int i = 0; i < 8; ++i) store<float>(out, kOffPixdim + 4 * i, pixdim[i]);
    store<float>(out, kOffVoxOffset, static_cast<float>(kDefaultVoxOffset));
    store<float>(out, kOffSclSlope, 1.0f);
    store<float>(out, kOffSclInter, 0.0f);
    out[kOffXyztUnits] = 10;
    store<float>(out, kOffToffset, static_cast<float>(four_d ? toffset : 0.0));
    const std::string desc = format_descrip(first.unit(), first.b0_dir(), extra);
    std::memcpy(out.data() + kOffDescrip, desc.data(), std::min<std::size_t>(desc.size(), 79));
    if (passthrough) {
        store<std::int16_t>(out, kOffQformCode, passthrough->qform_code);
        store<std::int16_t>(out, kOffSformCode, passthrough->sform_code);
        for (int i = 0; i < 18; ++i) store<float>(out, kOffTransform + 4 * i, passthrough->transform[i]);
    }
    const char magic[4] = {'n', '+', '1', '\0'};
    std::memcpy(out.data() + kOffMagic, magic, 4);

    std::size_t pos = kDefaultVoxOffset;
    for (const auto& f : frames)
        for (double v : f.data()) {
            if (width == 4)
                store<float>(out, pos, static_cast<float>(v));
            else
                store<double>(out, pos, v);
            pos += width;
        }
    return out;
}

} // namespace detail

/// Little-endian single-file NIfTI-1 bytes for one volume.
inline std::vector<std::uint8_t> write_nifti(const Volume3D& vol, int datatype = kFloat32,
                                             const std::optional<NiftiHeader>& passthrough = std::nullopt) {
    return detail::write_frames(std::span<const Volume3D>(&vol, 1), datatype, passthrough, 0.0, 0.0, "");
}

/// 4D file with one frame per echo. Echo times are encoded as
/// toffset + i * pixdim[4] and are only exact for uniform spacing.
inline std::vector<std::uint8_t> write_nifti_series(const MultiEchoSeries& s, bool phase, int datatype = kFloat32) {
    s.validate();
    const auto& frames = phase ? s.phase : s.magnitude;
    require(!frames.empty(), ErrorCode::InvalidArgument, "series has no phase volumes");
    const double spacing = s.echo_count() > 1 ? s.echo_times[1] - s.echo_times[0] : 0.0;
    char extra[32];
    std::snprintf(extra, sizeof(extra), ";kind=%s;B0T=%g", phase ? "phase" : "mag", s.b0_tesla);
    if (frames.size() == 1) return write_nifti(frames.front(), datatype);
    return detail::write_frames(frames, datatype, std::nullopt, s.echo_times.front(), spacing, extra);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::IoError, "short write to " + path.string());
}

inline NiftiImage read_nifti_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return read_nifti(bytes);
}

inline Volume3D read_volume(const std::filesystem::path& path) {
    NiftiImage img = read_nifti_file(path);
    require(!img.is_series(), ErrorCode::ShapeMismatch, path.string() + " is 4D, expected a single volume");
    return std::get<Volume3D>(std::move(img.content));
}

inline Mask3D read_mask(const std::filesystem::path& path) { return Mask3D::from_volume(read_volume(path)); }

inline void write_volume(const std::filesystem::path& path, const Volume3D& vol, int datatype = kFloat32) {
    write_file_bytes(path, write_nifti(vol, datatype));
}

} // namespace chisep::nifti
