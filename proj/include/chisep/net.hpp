#pragma once

// Small fully convolutional network (3x3x3 or 1x1x1 kernels, ReLU, same padding) with
// hand-written backpropagation, patch tiling, in-plane rotation augmentation,
// an RMSprop trainer and the two chi-separation inference pipelines.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "chisep/dipole.hpp"
#include "chisep/inversion.hpp"
#include "chisep/losses.hpp"
#include "chisep/nifti.hpp"
#include "chisep/volume.hpp"

namespace chisep {

struct NetConfig {
    std::size_t in_channels = 3;
    std::size_t out_channels = 2;
    std::vector<std::size_t> hidden{8, 8};
    std::size_t kernel_size = 3; ///< 3, or 1 for a pointwise network
    /// Output activation max(z, floor_c). With normalised labels the floor is
    /// -mean/std so that the de-normalised output is nonnegative.
    bool nonnegative_output = false;
    std::vector<double> output_floor;
    std::uint64_t seed = 0;
    std::vector<std::string> input_names;
    std::vector<std::string> output_names;

    void validate() const {
        require(in_channels >= 1 && out_channels >= 1, ErrorCode::InvalidArgument, "channel counts must be >= 1");
        for (auto h : hidden) require(h >= 1, ErrorCode::InvalidArgument, "hidden channel counts must be >= 1");
        require(kernel_size == 1 || kernel_size == 3, ErrorCode::InvalidArgument, "kernel size must be 1 or 3");
        require(output_floor.empty() || output_floor.size() == out_channels, ErrorCode::InvalidArgument,
                "output_floor needs one entry per output channel");
        require(input_names.empty() || input_names.size() == in_channels, ErrorCode::InvalidArgument,
                "input_names needs one entry per input channel");
        require(output_names.empty() || output_names.size() == out_channels, ErrorCode::InvalidArgument,
                "output_names needs one entry per output channel");
    }

    double floor(std::size_t c) const { return output_floor.empty() ? 0.0 : output_floor[c]; }
};

struct ConvLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t ksize = 3;
    std::vector<double> weights; ///< [out][in][kz][ky][kx]
    std::vector<double> bias;    ///< [out]

    std::size_t taps() const { return ksize * ksize * ksize; }
    double& w(std::size_t o, std::size_t i, std::size_t tap) { return weights[(o * in + i) * taps() + tap]; }
    double w(std::size_t o, std::size_t i, std::size_t tap) const { return weights[(o * in + i) * taps() + tap]; }
};

struct TinyNet {
    NetConfig config;
    std::vector<ConvLayer> layers;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.bias.size();
        return n;
    }

    /// Parameters in layer order, weights before biases.
    std::vector<double> flatten() const {
        std::vector<double> p;
        p.reserve(parameter_count());
        for (const auto& l : layers) {
            p.insert(p.end(), l.weights.begin(), l.weights.end());
            p.insert(p.end(), l.bias.begin(), l.bias.end());
        }
        return p;
    }

    void assign(std::span<const double> p) {
        require(p.size() == parameter_count(), ErrorCode::ShapeMismatch, "parameter vector has wrong length");
        std::size_t k = 0;
        for (auto& l : layers) {
            for (auto& v : l.weights) v = p[k++];
            for (auto& v : l.bias) v = p[k++];
        }
    }
};

/// He-normal weights, biases uniform in +-1/sqrt(fan_in), seeded by config.seed.
inline TinyNet make_net(const NetConfig& cfg) {
    cfg.validate();
    TinyNet net{cfg, {}};
    std::vector<std::size_t> widths{cfg.in_channels};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(cfg.out_channels);
    std::mt19937_64 rng(cfg.seed);
    const std::size_t k = cfg.kernel_size, taps = k * k * k;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        ConvLayer layer{widths[l], widths[l + 1], k, std::vector<double>(widths[l] * widths[l + 1] * taps),
                        std::vector<double>(widths[l + 1], 0.0)};
        const double fan_in = static_cast<double>(widths[l] * taps);
        std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / fan_in));
        std::uniform_real_distribution<double> spread(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
        for (auto& v : layer.weights) v = gauss(rng);
        for (auto& v : layer.bias) v = spread(rng);
        net.layers.push_back(std::move(layer));
    }
    return net;
}

/// Multi-channel activations on one grid, channel-major.
struct Tensor {
    Dims dims{};
    std::size_t channels = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Dims d, std::size_t c) : dims(d), channels(c), data(d.size() * c, 0.0) {}

    std::span<double> channel(std::size_t c) { return {data.data() + c * dims.size(), dims.size()}; }
    std::span<const double> channel(std::size_t c) const { return {data.data() + c * dims.size(), dims.size()}; }
};

namespace detail {

inline Tensor stack(std::span<const Volume3D> vols) {
    require(!vols.empty(), ErrorCode::ChannelMismatch, "no input channels");
    Tensor t(vols.front().dims(), vols.size());
    for (std::size_t c = 0; c < vols.size(); ++c) {
        require_same_grid(vols[c], vols.front(), "network input");
        std::copy(vols[c].data().begin(), vols[c].data().end(), t.channel(c).begin());
    }
    return t;
}

inline std::vector<Volume3D> unstack(const Tensor& t, const Volume3D& templ) {
    std::vector<Volume3D> out;
    for (std::size_t c = 0; c < t.channels; ++c) {
        auto ch = t.channel(c);
        out.push_back(templ.with_data(std::vector<double>(ch.begin(), ch.end())).with_unit(Unit::dimensionless));
    }
    return out;
}

struct Offset {
    long dx, dy, dz;
};

inline Offset tap_offset(std::size_t tap, std::size_t k) {
    const long h = static_cast<long>(k / 2);
    return {static_cast<long>(tap % k) - h, static_cast<long>((tap / k) % k) - h, static_cast<long>(tap / (k * k)) - h};
}

// Visits every (output row, shifted input row) pair for one tap with the
// valid x range, implementing zero same-padding.
template <typename F>
void for_each_row(const Dims& d, Offset o, F&& f) {
    const long nx = static_cast<long>(d.nx), ny = static_cast<long>(d.ny), nz = static_cast<long>(d.nz);
    const long x0 = std::max(0L, -o.dx), x1 = std::min(nx, nx - o.dx);
    if (x1 <= x0) return;
    for (long z = std::max(0L, -o.dz); z < std::min(nz, nz - o.dz); ++z)
        for (long y = std::max(0L, -o.dy); y < std::min(ny, ny - o.dy); ++y) {
            const auto dst = static_cast<std::size_t>((z * ny + y) * nx);
            const auto src = static_cast<std::size_t>(((z + o.dz) * ny + (y + o.dy)) * nx + o.dx);
            f(dst, src, static_cast<std::size_t>(x0), static_cast<std::size_t>(x1));
        }
}

inline Tensor conv_forward(const ConvLayer& layer, const Tensor& in) {
    require(in.channels == layer.in, ErrorCode::ChannelMismatch,
            "layer expects " + std::to_string(layer.in) + " channels, got " + std::to_string(in.channels));
    Tensor out(in.dims, layer.out);
    for (std::size_t o = 0; o < layer.out; ++o) {
        auto dst = out.channel(o);
        std::fill(dst.begin(), dst.end(), layer.bias[o]);
        for (std::size_t i = 0; i < layer.in; ++i) {
            const auto src = in.channel(i);
            for (std::size_t tap = 0; tap < layer.taps(); ++tap) {
                const double w = layer.w(o, i, tap);
                if (w == 0.0) continue;
                for_each_row(in.dims, tap_offset(tap, layer.ksize), [&](std::size_t d0, std::size_t s0, std::size_t x0, std::size_t x1) {
                    double* __restrict dp = dst.data() + d0;
                    const double* __restrict sp = src.data() + s0;
                    for (std::size_t x = x0; x < x1; ++x) dp[x] += w * sp[x];
                });
            }
        }
    }
    return out;
}

struct Trace {
    std::vector<Tensor> pre;  ///< pre-activation of each layer
    std::vector<Tensor> post; ///< post[0] is the input, post[l + 1] the activation of layer l
};

inline Trace forward_trace(const TinyNet& net, Tensor input) {
    require(input.channels == net.config.in_channels, ErrorCode::ChannelMismatch,
            "network expects " + std::to_string(net.config.in_channels) + " input channels, got " +
                std::to_string(input.channels));
    Trace t;
    t.post.push_back(std::move(input));
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        Tensor z = conv_forward(net.layers[l], t.post.back());
        Tensor a = z;
        const bool last = l + 1 == net.layers.size();
        if (!last) {
            for (auto& v : a.data) v = std::max(0.0, v);
        } else if (net.config.nonnegative_output) {
            for (std::size_t c = 0; c < a.channels; ++c)
                for (auto& v : a.channel(c)) v = std::max(net.config.floor(c), v);
        }
        t.pre.push_back(std::move(z));
        t.post.push_back(std::move(a));
    }
    return t;
}

} // namespace detail

inline std::vector<Volume3D> forward(const TinyNet& net, std::span<const Volume3D> input) {
    require(input.size() == net.config.in_channels, ErrorCode::ChannelMismatch,
            "network expects " + std::to_string(net.config.in_channels) + " input channels, got " +
                std::to_string(input.size()));
    const auto trace = detail::forward_trace(net, detail::stack(input));
    return detail::unstack(trace.post.back(), input.front());
}

struct NetGradients {
    std::vector<ConvLayer> layers; ///< same shapes as the network, holding dL/dparameter
    std::vector<Volume3D> input;   ///< dL/dinput per channel

    std::vector<double> flatten() const {
        std::vector<double> p;
        for (const auto& l : layers) {
            p.insert(p.end(), l.weights.begin(), l.weights.end());
            p.insert(p.end(), l.bias.begin(), l.bias.end());
        }
        return p;
    }
};

/// Gradients of a scalar loss given dL/d(output) per output channel. ReLU
/// subgradient at the kink is 0.
inline NetGradients backward(const TinyNet& net, std::span<const Volume3D> input,
                             std::span<const std::vector<double>> upstream) {
    require(input.size() == net.config.in_channels, ErrorCode::ChannelMismatch, "input channel count");
    require(upstream.size() == net.config.out_channels, ErrorCode::ShapeMismatch,
            "upstream gradient needs one buffer per output channel");
    const Dims d = input.front().dims();
    for (const auto& u : upstream)
        require(u.size() == d.size(), ErrorCode::ShapeMismatch, "upstream gradient has wrong voxel count");
    const auto trace = detail::forward_trace(net, detail::stack(input));

    NetGradients grads;
    grads.layers.resize(net.layers.size());
    Tensor delta(d, net.config.out_channels);
    for (std::size_t c = 0; c < upstream.size(); ++c) std::copy(upstream[c].begin(), upstream[c].end(), delta.channel(c).begin());

    for (std::size_t l = net.layers.size(); l-- > 0;) {
        const ConvLayer& layer = net.layers[l];
        const Tensor& z = trace.pre[l];
        const bool last = l + 1 == net.layers.size();
        // through the activation
        for (std::size_t c = 0; c < layer.out; ++c) {
            auto dc = delta.channel(c);
            const auto zc = z.channel(c);
            const double fl = last ? net.config.floor(c) : 0.0;
            if (last && !net.config.nonnegative_output) continue;
            for (std::size_t i = 0; i < dc.size(); ++i)
                if (!(zc[i] > fl)) dc[i] = 0.0;
        }
        const Tensor& in = trace.post[l];
        ConvLayer& g = grads.layers[l];
        g = ConvLayer{layer.in, layer.out, layer.ksize, std::vector<double>(layer.weights.size(), 0.0),
                      std::vector<double>(layer.out, 0.0)};
        Tensor din(d, layer.in);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const auto dc = delta.channel(o);
            g.bias[o] = std::accumulate(dc.begin(), dc.end(), 0.0);
            for (std::size_t i = 0; i < layer.in; ++i) {
                const auto src = in.channel(i);
                auto dst = din.channel(i);
                for (std::size_t tap = 0; tap < layer.taps(); ++tap) {
                    double acc = 0.0;
                    const double w = layer.w(o, i, tap);
                    detail::for_each_row(d, detail::tap_offset(tap, layer.ksize),
                                         [&](std::size_t d0, std::size_t s0, std::size_t x0, std::size_t x1) {
                                             const double* dp = dc.data() + d0;
                                             const double* sp = src.data() + s0;
                                             double* ip = dst.data() + s0;
                                             for (std::size_t x = x0; x < x1; ++x) {
                                                 acc += dp[x] * sp[x];
                                                 ip[x] += w * dp[x];
                                             }
                                         });
                    g.w(o, i, tap) = acc;
                }
            }
        }
        delta = std::move(din);
    }
    grads.input = detail::unstack(delta, input.front());
    return grads;
}

// --- patches -------------------------------------------------------------

/// Start offsets along one axis: stride patch - overlap, with the trailing
/// patch shifted to end flush with the boundary.
inline std::vector<std::size_t> patch_starts(std::size_t n, std::size_t patch, std::size_t overlap) {
    require(patch >= 1 && patch <= n, ErrorCode::PatchTooLarge,
            "patch " + std::to_string(patch) + " exceeds axis length " + std::to_string(n));
    require(overlap < patch, ErrorCode::InvalidArgument, "overlap must be smaller than the patch");
    const std::size_t stride = patch - overlap;
    std::vector<std::size_t> starts{0};
    while (starts.back() + patch < n) starts.push_back(std::min(starts.back() + stride, n - patch));
    return starts;
}

struct Patch {
    std::array<std::size_t, 3> origin{};
    std::vector<Volume3D> volumes;
};

inline Volume3D crop(const Volume3D& v, std::array<std::size_t, 3> origin, const Dims& size) {
    const Dims d = v.dims();
    require(origin[0] + size.nx <= d.nx && origin[1] + size.ny <= d.ny && origin[2] + size.nz <= d.nz,
            ErrorCode::PatchTooLarge, "crop window leaves the grid");
    std::vector<double> out(size.size());
    std::size_t k = 0;
    for (std::size_t z = 0; z < size.nz; ++z)
        for (std::size_t y = 0; y < size.ny; ++y)
            for (std::size_t x = 0; x < size.nx; ++x) out[k++] = v.at(origin[0] + x, origin[1] + y, origin[2] + z);
    return Volume3D(size, std::move(out), v.voxel_size(), v.unit(), v.b0_dir());
}

inline Mask3D crop(const Mask3D& m, std::array<std::size_t, 3> origin, const Dims& size) {
    const Volume3D c = crop(m.to_volume(), origin, size);
    return Mask3D::from_volume(c);
}

/// Tiles all volumes identically, ordered z, then y, then x.
inline std::vector<Patch> extract_patches(std::span<const Volume3D> vols, const Dims& patch, std::size_t overlap) {
    require(!vols.empty(), ErrorCode::InvalidArgument, "no volumes to tile");
    const Dims d = vols.front().dims();
    for (const auto& v : vols) require_same_grid(v, vols.front(), "extract_patches");
    require(patch.nx <= d.nx && patch.ny <= d.ny && patch.nz <= d.nz, ErrorCode::PatchTooLarge,
            "patch " + patch.str() + " exceeds grid " + d.str());
    const auto xs = patch_starts(d.nx, patch.nx, overlap), ys = patch_starts(d.ny, patch.ny, overlap),
               zs = patch_starts(d.nz, patch.nz, overlap);
    std::vector<Patch> out;
    for (auto z : zs)
        for (auto y : ys)
            for (auto x : xs) {
                Patch p{{x, y, z}, {}};
                for (const auto& v : vols) p.volumes.push_back(crop(v, p.origin, patch));
                out.push_back(std::move(p));
            }
    return out;
}

inline std::vector<Patch> extract_patches(std::span<const Volume3D> vols, std::size_t patch, std::size_t overlap) {
    return extract_patches(vols, Dims{patch, patch, patch}, overlap);
}

/// Averages channel `channel` of overlapping patches back onto the full grid.
inline Volume3D assemble_patches(std::span<const Patch> patches, std::size_t channel, const Volume3D& like) {
    const Dims d = like.dims();
    std::vector<double> sum(d.size(), 0.0), count(d.size(), 0.0);
    for (const auto& p : patches) {
        const Volume3D& v = p.volumes.at(channel);
        const Dims s = v.dims();
        for (std::size_t z = 0; z < s.nz; ++z)
            for (std::size_t y = 0; y < s.ny; ++y)
                for (std::size_t x = 0; x < s.nx; ++x) {
                    const std::size_t i = like.index(p.origin[0] + x, p.origin[1] + y, p.origin[2] + z);
                    sum[i] += v.at(x, y, z);
                    count[i] += 1.0;
                }
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = count[i] > 0.0 ? sum[i] / count[i] : 0.0;
    return like.with_data(std::move(sum));
}

// --- augmentation ----------------------------------------------------------

namespace detail {

inline double snap(double u) {
    const double r = std::round(u);
    return std::abs(u - r) < 1e-9 ? r : u;
}

inline double sample_bilinear(const Volume3D& v, double u, double w, std::size_t z) {
    const Dims d = v.dims();
    u = snap(u);
    w = snap(w);
    const double umax = static_cast<double>(d.nx - 1), wmax = static_cast<double>(d.ny - 1);
    if (u < 0.0 || w < 0.0 || u > umax || w > wmax) return 0.0;
    const auto x0 = static_cast<std::size_t>(std::floor(u)), y0 = static_cast<std::size_t>(std::floor(w));
    const std::size_t x1 = std::min(x0 + 1, d.nx - 1), y1 = std::min(y0 + 1, d.ny - 1);
    const double fx = u - static_cast<double>(x0), fy = w - static_cast<double>(y0);
    return (1 - fx) * (1 - fy) * v.at(x0, y0, z) + fx * (1 - fy) * v.at(x1, y0, z) + (1 - fx) * fy * v.at(x0, y1, z) +
           fx * fy * v.at(x1, y1, z);
}

} // namespace detail

/// Rotates every volume by angle_deg in the plane perpendicular to an axial
/// B0, about the grid centre, with linear interpolation (samples along z are
/// exact so trilinear reduces to bilinear). Samples outside the grid are 0.
inline std::vector<Volume3D> augment_rotate_z(std::span<const Volume3D> vols, double angle_deg) {
    require(angle_deg >= -90.0 && angle_deg <= 90.0, ErrorCode::BadAngle,
            "rotation angle must lie in [-90, 90] degrees");
    std::vector<Volume3D> out;
    if (vols.empty()) return out;
    for (const auto& v : vols) {
        require(std::abs(v.b0_dir()[0]) <= 1e-9 && std::abs(v.b0_dir()[1]) <= 1e-9 && v.b0_dir()[2] > 0.0,
                ErrorCode::B0NotAxial, "in-plane rotation requires B0 along +z");
        require_same_grid(v, vols.front(), "augment_rotate_z");
    }
    const Dims d = vols.front().dims();
    const double th = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cx = (static_cast<double>(d.nx) - 1.0) / 2.0, cy = (static_cast<double>(d.ny) - 1.0) / 2.0;
    for (const auto& v : vols) {
        if (angle_deg == 0.0) {
            out.push_back(v);
            continue;
        }
        std::vector<double> r(v.size());
        for (std::size_t z = 0; z < d.nz; ++z)
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const double px = static_cast<double>(x) - cx, py = static_cast<double>(y) - cy;
                    // inverse rotation maps output voxel to its source
                    const double u = c * px + s * py + cx, w = -s * px + c * py + cy;
                    r[v.index(x, y, z)] = detail::sample_bilinear(v, u, w, z);
                }
        out.push_back(v.with_data(std::move(r)));
    }
    return out;
}

inline Mask3D rotate_mask(const Mask3D& m, double angle_deg) {
    const Volume3D v = m.to_volume();
    const auto r = augment_rotate_z(std::span<const Volume3D>(&v, 1), angle_deg);
    Mask3D out(m.dims);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = r[0][i] >= 0.5 ? 1 : 0;
    return out;
}

// --- training ----------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 3e-4;
    double rho = 0.9;
    double eps = 1e-8;
    std::size_t step_size = 1000;
    double gamma = 0.98;
    std::size_t batch_size = 12;
    std::size_t max_steps = 200;
    std::uint64_t seed = 0;

    void validate() const {
        require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidArgument,
                "learning rate must be >= 0");
        require(rho > 0.0 && rho < 1.0, ErrorCode::InvalidArgument, "rmsprop decay must lie in (0, 1)");
        require(eps > 0.0, ErrorCode::InvalidArgument, "rmsprop eps must be positive");
        require(step_size >= 1, ErrorCode::InvalidArgument, "step size must be >= 1");
        require(gamma > 0.0 && gamma <= 1.0, ErrorCode::InvalidArgument, "gamma must lie in (0, 1]");
        require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be >= 1");
    }
};

struct TrainResult {
    TinyNet net;
    std::vector<LossBreakdown> history; ///< batch-mean loss before each update
    std::size_t steps = 0;
};

/// Loss and parameter gradient of one sample.
inline std::pair<LossBreakdown, std::vector<double>> sample_gradient(const TinyNet& net, const Objective& obj,
                                                                     const TrainingSample& s) {
    const auto out = forward(net, s.inputs);
    std::vector<std::vector<double>> gout;
    const LossBreakdown b = evaluate_objective(obj, s, out, &gout);
    const NetGradients g = backward(net, s.inputs, gout);
    return {b, g.flatten()};
}

inline LossBreakdown dataset_loss(const TinyNet& net, const Objective& obj, std::span<const TrainingSample> data) {
    LossBreakdown acc;
    for (const auto& s : data) {
        const auto out = forward(net, s.inputs);
        const LossBreakdown b = evaluate_objective(obj, s, out);
        acc.recon += b.recon;
        acc.gradient += b.gradient;
        acc.model_qsm += b.model_qsm;
        acc.model_field += b.model_field;
        acc.model_r2p += b.model_r2p;
        acc.total += b.total;
    }
    const double n = static_cast<double>(data.size());
    for (double* v : {&acc.recon, &acc.gradient, &acc.model_qsm, &acc.model_field, &acc.model_r2p, &acc.total}) *v /= n;
    return acc;
}

/// RMSprop with a step learning-rate schedule. Batches are drawn from a
/// seeded per-epoch shuffle and reduced in fixed order, so runs are
/// bit-reproducible.
inline TrainResult train(TinyNet net, std::span<const TrainingSample> dataset, const Objective& obj,
                         const TrainConfig& cfg) {
    cfg.validate();
    require(!dataset.empty(), ErrorCode::EmptyDataset, "training set is empty");
    require(objective_outputs(obj) == net.config.out_channels, ErrorCode::ChannelMismatch,
            "objective and network disagree on output channels");
    std::vector<double> params = net.flatten();
    std::vector<double> sq(params.size(), 0.0);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    TrainResult result;
    result.history.reserve(cfg.max_steps);
    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
        const double lr = cfg.learning_rate * std::pow(cfg.gamma, static_cast<double>(step / cfg.step_size));
        const std::size_t bs = std::min(cfg.batch_size, dataset.size());
        std::vector<std::size_t> batch;
        for (std::size_t b = 0; b < bs; ++b) {
            if (cursor == order.size()) {
                if (dataset.size() > bs) std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        std::vector<double> grad(params.size(), 0.0);
        LossBreakdown mean;
        for (std::size_t idx : batch) {
            auto [b, g] = sample_gradient(net, obj, dataset[idx]);
            for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
            mean.recon += b.recon;
            mean.gradient += b.gradient;
            mean.model_qsm += b.model_qsm;
            mean.model_field += b.model_field;
            mean.model_r2p += b.model_r2p;
            mean.total += b.total;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (double* v : {&mean.recon, &mean.gradient, &mean.model_qsm, &mean.model_field, &mean.model_r2p, &mean.total})
            *v *= inv;
        require(std::isfinite(mean.total), ErrorCode::DivergedLoss, "loss became non-finite at step " + std::to_string(step));
        result.history.push_back(mean);
        for (std::size_t k = 0; k < params.size(); ++k) {
            const double g = grad[k] * inv;
            sq[k] = cfg.rho * sq[k] + (1.0 - cfg.rho) * g * g;
            params[k] -= lr * g / (std::sqrt(sq[k]) + cfg.eps);
        }
        for (double p : params)
            require(std::isfinite(p), ErrorCode::DivergedLoss, "parameters became non-finite at step " + std::to_string(step));
        net.assign(params);
        result.steps = step + 1;
    }
    result.net = std::move(net);
    return result;
}

// --- datasets -------------------------------------------------------------------

/// Patches (and rotated copies) of normalised inputs/labels as training
/// samples. Angle 0 is the unrotated data; masks are rotated with the maps.
inline std::vector<TrainingSample> build_samples(std::span<const Volume3D> inputs_n, std::span<const Volume3D> labels_n,
                                                 const Mask3D& mask, const Dims& patch, std::size_t overlap,
                                                 std::span<const double> angles_deg, bool with_kernel) {
    require(!inputs_n.empty() && !labels_n.empty(), ErrorCode::EmptyDataset, "no channels");
    std::vector<double> angles(angles_deg.begin(), angles_deg.end());
    if (angles.empty()) angles.push_back(0.0);
    std::map<std::array<std::size_t, 3>, std::shared_ptr<const DipoleKernel>> kernels;
    std::vector<TrainingSample> out;
    for (double angle : angles) {
        std::vector<Volume3D> all(inputs_n.begin(), inputs_n.end());
        all.insert(all.end(), labels_n.begin(), labels_n.end());
        all.push_back(mask.to_volume(inputs_n.front().voxel_size()).with_b0(inputs_n.front().b0_dir()));
        if (angle != 0.0) all = augment_rotate_z(all, angle);
        for (auto& p : extract_patches(all, patch, overlap)) {
            TrainingSample s;
            s.inputs.assign(p.volumes.begin(), p.volumes.begin() + static_cast<long>(inputs_n.size()));
            s.labels.assign(p.volumes.begin() + static_cast<long>(inputs_n.size()), p.volumes.end() - 1);
            Mask3D m(patch);
            for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p.volumes.back()[i] >= 0.5 ? 1 : 0;
            if (m.empty()) continue;
            s.mask = std::move(m);
            if (with_kernel) {
                const std::array<std::size_t, 3> key{patch.nx, patch.ny, patch.nz};
                auto& k = kernels[key];
                if (!k)
                    k = std::make_shared<const DipoleKernel>(
                        build_kernel(patch, inputs_n.front().voxel_size(), inputs_n.front().b0_dir()));
                s.kernel = k;
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

// --- inference --------------------------------------------------------------

/// A network plus the normalisation statistics its inputs and outputs were
/// trained with.
struct TrainedModel {
    TinyNet net;
    std::vector<NormStats> input_stats;
    std::vector<NormStats> output_stats;
    std::size_t step = 0;
};

/// Normalise, run the full volume (no patching), de-normalise and clamp >= 0.
inline std::vector<Volume3D> run_model(const TrainedModel& m, std::span<const Volume3D> inputs) {
    require(inputs.size() == m.input_stats.size() && inputs.size() == m.net.config.in_channels,
            ErrorCode::ChannelMismatch, "model input count mismatch");
    require(m.output_stats.size() == m.net.config.out_channels, ErrorCode::ChannelMismatch, "model output stats");
    for (const auto& v : inputs) require_same_grid(v, inputs.front(), "model inputs");
    std::vector<Volume3D> norm;
    for (std::size_t c = 0; c < inputs.size(); ++c) norm.push_back(apply_normalization(inputs[c], m.input_stats[c]));
    auto out = forward(m.net, norm);
    for (std::size_t c = 0; c < out.size(); ++c) {
        Volume3D phys = denormalize(out[c], m.output_stats[c]);
        for (auto& v : phys.data()) v = std::max(0.0, v);
        out[c] = std::move(phys);
    }
    return out;
}

inline std::vector<std::string> default_chisep_inputs() { return {"qsm", "field", "r2prime"}; }

/// Measured-R2' pipeline: (QSM, local field, R2') -> (chi_para, chi_dia).
/// Models trained without one of the inputs (named in config.input_names)
/// simply do not receive it.
inline SourceMaps infer_chisep_r2prime(const Volume3D& qsm, const Volume3D& field, const Volume3D& r2prime,
                                       const TrainedModel& chisep) {
    require_same_grid(qsm, field, "infer_chisep_r2prime");
    require_same_grid(qsm, r2prime, "infer_chisep_r2prime");
    const auto names = chisep.net.config.input_names.empty() ? default_chisep_inputs() : chisep.net.config.input_names;
    std::vector<Volume3D> inputs;
    for (const auto& n : names) {
        if (n == "qsm")
            inputs.push_back(qsm);
        else if (n == "field")
            inputs.push_back(field);
        else if (n == "r2prime")
            inputs.push_back(r2prime);
        else
            fail(ErrorCode::ChannelMismatch, "unknown chi-separation input '" + n + "'");
    }
    require(chisep.net.config.out_channels == 2, ErrorCode::ChannelMismatch, "chi-separation model needs 2 outputs");
    auto out = run_model(chisep, inputs);
    return {out[0].with_unit(Unit::ppm), out[1].with_unit(Unit::ppm)};
}

/// GRE-only pipeline: R2' is first estimated from R2* by a second network.
inline SourceMaps infer_chisep_r2star(const Volume3D& qsm, const Volume3D& field, const Volume3D& r2star,
                                      const TrainedModel& r2prime_net, const TrainedModel& chisep) {
    require_same_grid(qsm, r2star, "infer_chisep_r2star");
    require(r2prime_net.net.config.in_channels == 1 && r2prime_net.net.config.out_channels == 1,
            ErrorCode::ChannelMismatch, "R2' model must map one channel to one channel");
    const auto est = run_model(r2prime_net, std::span<const Volume3D>(&r2star, 1));
    return infer_chisep_r2prime(qsm, field, est[0].with_unit(Unit::per_second), chisep);
}

// --- checkpoints ---------------------------------------------------------------

namespace detail {

inline nlohmann::json stats_json(const std::vector<NormStats>& s) {
    auto a = nlohmann::json::array();
    for (const auto& v : s) a.push_back({{"mean", v.mean}, {"std", v.std}, {"unit", std::string(to_string(v.unit))}});
    return a;
}

inline std::vector<NormStats> stats_from_json(const nlohmann::json& a) {
    std::vector<NormStats> s;
    for (const auto& v : a)
        s.push_back({v.at("mean").get<double>(), v.at("std").get<double>(),
                     unit_from_string(v.value("unit", std::string("dimensionless")))});
    return s;
}

} // namespace detail

inline nlohmann::json config_to_json(const NetConfig& c) {
    return {{"in_channels", c.in_channels},
            {"out_channels", c.out_channels},
            {"hidden", c.hidden},
            {"kernel", {c.kernel_size, c.kernel_size, c.kernel_size}},
            {"activation", "relu"},
            {"nonnegative_output", c.nonnegative_output},
            {"output_floor", c.output_floor},
            {"input_names", c.input_names},
            {"output_names", c.output_names}};
}

inline NetConfig config_from_json(const nlohmann::json& j, std::uint64_t seed) {
    NetConfig c;
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.out_channels = j.at("out_channels").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    if (j.contains("kernel")) c.kernel_size = j.at("kernel").at(0).get<std::size_t>();
    c.nonnegative_output = j.value("nonnegative_output", false);
    c.output_floor = j.value("output_floor", std::vector<double>{});
    c.input_names = j.value("input_names", std::vector<std::string>{});
    c.output_names = j.value("output_names", std::vector<std::string>{});
    c.seed = seed;
    c.validate();
    return c;
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian float64
/// parameters, per-layer byte offsets in the manifest).
inline void save_checkpoint(const std::filesystem::path& manifest_path, const TrainedModel& m) {
    const std::filesystem::path blob_path = std::filesystem::path(manifest_path).replace_extension(".bin");
    nlohmann::json j;
    j["format"] = "chisep-tinynet-1";
    j["config"] = config_to_json(m.net.config);
    j["seed"] = m.net.config.seed;
    j["step"] = m.step;
    j["blob"] = blob_path.filename().string();
    j["input_stats"] = detail::stats_json(m.input_stats);
    j["output_stats"] = detail::stats_json(m.output_stats);
    std::vector<std::uint8_t> blob;
    auto layers = nlohmann::json::array();
    auto put = [&](const std::vector<double>& vals) {
        const std::size_t off = blob.size();
        blob.resize(off + 8 * vals.size());
        for (std::size_t k = 0; k < vals.size(); ++k) nifti::detail::store<double>(blob, off + 8 * k, vals[k]);
        return off;
    };
    for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
        const auto& layer = m.net.layers[l];
        const std::size_t woff = put(layer.weights);
        const std::size_t boff = put(layer.bias);
        layers.push_back({{"index", l},
                          {"in", layer.in},
                          {"out", layer.out},
                          {"weights_offset", woff},
                          {"weights_count", layer.weights.size()},
                          {"bias_offset", boff},
                          {"bias_count", layer.bias.size()}});
    }
    j["layers"] = layers;
    j["blob_bytes"] = blob.size();
    nifti::write_file_bytes(blob_path, blob);
    std::ofstream out(manifest_path);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + manifest_path.string());
    out << j.dump(2) << "\n";
}

inline TrainedModel load_checkpoint(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + manifest_path.string());
    nlohmann::json j;
    try {
        in >> j;
        require(j.value("format", std::string()) == "chisep-tinynet-1", ErrorCode::BadSpec, "unknown checkpoint format");
        TrainedModel m;
        m.net = make_net(config_from_json(j.at("config"), j.value("seed", std::uint64_t{0})));
        m.step = j.value("step", std::size_t{0});
        m.input_stats = detail::stats_from_json(j.at("input_stats"));
        m.output_stats = detail::stats_from_json(j.at("output_stats"));
        const auto blob = nifti::read_file_bytes(manifest_path.parent_path() / j.at("blob").get<std::string>());
        require(blob.size() == j.at("blob_bytes").get<std::size_t>(), ErrorCode::TruncatedData, "checkpoint blob size");
        const auto& layers = j.at("layers");
        require(layers.size() == m.net.layers.size(), ErrorCode::ShapeMismatch, "checkpoint layer count");
        auto fetch = [&](std::size_t off, std::size_t count, std::vector<double>& dst) {
            require(dst.size() == count && off + 8 * count <= blob.size(), ErrorCode::ShapeMismatch,
                    "checkpoint layer shape");
            for (std::size_t k = 0; k < count; ++k) dst[k] = nifti::detail::load<double>(blob, off + 8 * k, !nifti::detail::kHostLittle);
        };
        for (std::size_t l = 0; l < layers.size(); ++l) {
            fetch(layers[l].at("weights_offset"), layers[l].at("weights_count"), m.net.layers[l].weights);
            fetch(layers[l].at("bias_offset"), layers[l].at("bias_count"), m.net.layers[l].bias);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::BadSpec, std::string("checkpoint manifest: ") + e.what());
    }
}

} // namespace chisep
