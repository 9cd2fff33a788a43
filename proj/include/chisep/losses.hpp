#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <variant>
#include <vector>

#include "chisep/dipole.hpp"
#include "chisep/volume.hpp"

namespace chisep {

struct LossWeights {
    double recon = 1.0;
    double grad = 0.1;
    double model = 1.0;
    double l1 = 1.0;       ///< R2' network L1 term
    double grad_r2p = 0.1; ///< R2' network gradient term
};

/// Per-voxel-mean L1 magnitudes. total is the weighted combination.
struct LossBreakdown {
    double recon = 0.0;
    double gradient = 0.0;
    double model_qsm = 0.0;
    double model_field = 0.0;
    double model_r2p = 0.0;
    double total = 0.0;

    double model() const { return model_qsm + model_field + model_r2p; }
};

/// Normalisation statistics of the five maps entering the physics terms.
struct ModelStats {
    NormStats para;
    NormStats dia;
    NormStats qsm;
    NormStats field;
    NormStats r2prime;
};

struct ModelTerms {
    double qsm = 0.0;
    double field = 0.0;
    double r2p = 0.0;
};

/// Which physics terms are active; networks trained without the QSM or the
/// field input drop the matching term.
struct ModelTermSelection {
    bool qsm = true;
    bool field = true;
    bool r2p = true;
};

namespace detail {

inline double sgn(double v) { return v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0; }

inline double mask_count(const Mask3D& mask) {
    const auto n = static_cast<double>(mask.count());
    require(n > 0.0, ErrorCode::EmptyResult, "loss mask is empty");
    return n;
}

/// mean_mask |r|; accumulates d/dr into grad when given.
inline double l1_mean(std::span<const double> r, const Mask3D& mask, double* grad = nullptr, double scale = 1.0) {
    const double n = mask_count(mask);
    double acc = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (!mask[i]) continue;
        acc += std::abs(r[i]);
        if (grad) grad[i] += scale * sgn(r[i]) / n;
    }
    return acc / n;
}

/// Sum over axes of mean_mask | |grad_a out| - |grad_a lbl| | with forward
/// differences (last plane zero). Accumulates d/d(out) into grad when given.
inline double gradient_term(std::span<const double> out, std::span<const double> lbl, const Dims& d,
                            const Mask3D& mask, double* grad = nullptr, double scale = 1.0) {
    const double n = mask_count(mask);
    double acc = 0.0;
    for (int a = 0; a < 3; ++a) {
        if (d[a] < 2) continue;
        const std::size_t stride = a == 0 ? 1 : a == 1 ? d.nx : d.nx * d.ny;
        for (std::size_t z = 0; z < d.nz; ++z)
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const std::size_t i = x + d.nx * (y + d.ny * z);
                    if (!mask[i]) continue;
                    const std::size_t pos = a == 0 ? x : a == 1 ? y : z;
                    if (pos + 1 == d[a]) continue; // both gradients are zero on the last plane
                    const double go = out[i + stride] - out[i];
                    const double gl = lbl[i + stride] - lbl[i];
                    const double r = std::abs(go) - std::abs(gl);
                    acc += std::abs(r);
                    if (grad) {
                        const double c = scale * sgn(r) * sgn(go) / n;
                        grad[i + stride] += c;
                        grad[i] -= c;
                    }
                }
    }
    return acc / n;
}

inline void require_grid(const Volume3D& a, const Volume3D& b, const char* what) { require_same_grid(a, b, what); }

} // namespace detail

// --- chi-separation losses ---------------------------------------------

inline double loss_recon(const Volume3D& out_para, const Volume3D& out_dia, const Volume3D& lbl_para,
                         const Volume3D& lbl_dia, const Mask3D& mask) {
    detail::require_grid(out_para, lbl_para, "loss_recon");
    detail::require_grid(out_dia, lbl_dia, "loss_recon");
    detail::require_grid(out_para, out_dia, "loss_recon");
    require_mask(out_para, mask, "loss_recon");
    std::vector<double> rp(out_para.size()), rd(out_para.size());
    for (std::size_t i = 0; i < rp.size(); ++i) {
        rp[i] = out_para[i] - lbl_para[i];
        rd[i] = out_dia[i] - lbl_dia[i];
    }
    return detail::l1_mean(rp, mask) + detail::l1_mean(rd, mask);
}

/// Edge loss over any number of output/label channel pairs.
inline double loss_gradient(std::span<const Volume3D> outputs, std::span<const Volume3D> labels, const Mask3D& mask) {
    require(outputs.size() == labels.size(), ErrorCode::ChannelMismatch, "output/label channel counts differ");
    double acc = 0.0;
    for (std::size_t c = 0; c < outputs.size(); ++c) {
        detail::require_grid(outputs[c], labels[c], "loss_gradient");
        require_mask(outputs[c], mask, "loss_gradient");
        acc += detail::gradient_term(outputs[c].data(), labels[c].data(), outputs[c].dims(), mask);
    }
    return acc;
}

namespace detail {

/// Physics residual terms on normalised maps; writes d/d(para_n), d/d(dia_n)
/// when gradient buffers are given. Absent inputs (empty spans) disable their term.
inline ModelTerms model_terms(std::span<const double> para_n, std::span<const double> dia_n,
                              std::span<const double> qsm_n, std::span<const double> field_n,
                              std::span<const double> r2p_n, const DipoleKernel& kernel, double dr,
                              const ModelStats& st, const Mask3D& mask, ModelTermSelection sel, double weight,
                              double* g_para, double* g_dia) {
    const std::size_t n = para_n.size();
    for (const NormStats* s : {&st.para, &st.dia, &st.qsm, &st.field, &st.r2prime})
        require(s->std > 0.0, ErrorCode::DegenerateStats, "model loss stats need positive std");
    std::vector<double> para(n), dia(n), diff(n);
    for (std::size_t i = 0; i < n; ++i) {
        para[i] = para_n[i] * st.para.std + st.para.mean;
        dia[i] = dia_n[i] * st.dia.std + st.dia.mean;
        diff[i] = para[i] - dia[i];
    }
    ModelTerms t;
    std::vector<double> r(n);
    std::vector<double> gr;
    if (sel.qsm && !qsm_n.empty()) {
        for (std::size_t i = 0; i < n; ++i) r[i] = (diff[i] - (qsm_n[i] * st.qsm.std + st.qsm.mean)) / st.qsm.std;
        if (g_para) gr.assign(n, 0.0);
        t.qsm = l1_mean(r, mask, g_para ? gr.data() : nullptr, weight);
        if (g_para)
            for (std::size_t i = 0; i < n; ++i) {
                g_para[i] += gr[i] * st.para.std / st.qsm.std;
                g_dia[i] -= gr[i] * st.dia.std / st.qsm.std;
            }
    }
    if (sel.field && !field_n.empty()) {
        const auto conv = kspace_multiply(diff, kernel.dims, kernel.kvals);
        for (std::size_t i = 0; i < n; ++i)
            r[i] = (conv[i] - (field_n[i] * st.field.std + st.field.mean)) / st.field.std;
        if (g_para) gr.assign(n, 0.0);
        t.field = l1_mean(r, mask, g_para ? gr.data() : nullptr, weight);
        if (g_para) {
            // the dipole operator is real and even, hence self-adjoint
            const auto back = kspace_multiply(gr, kernel.dims, kernel.kvals);
            for (std::size_t i = 0; i < n; ++i) {
                g_para[i] += back[i] * st.para.std / st.field.std;
                g_dia[i] -= back[i] * st.dia.std / st.field.std;
            }
        }
    }
    if (sel.r2p && !r2p_n.empty()) {
        for (std::size_t i = 0; i < n; ++i)
            r[i] = (dr * (para[i] + dia[i]) - (r2p_n[i] * st.r2prime.std + st.r2prime.mean)) / st.r2prime.std;
        if (g_para) gr.assign(n, 0.0);
        t.r2p = l1_mean(r, mask, g_para ? gr.data() : nullptr, weight);
        if (g_para)
            for (std::size_t i = 0; i < n; ++i) {
                g_para[i] += gr[i] * dr * st.para.std / st.r2prime.std;
                g_dia[i] += gr[i] * dr * st.dia.std / st.r2prime.std;
            }
    }
    return t;
}

} // namespace detail

/// Physics consistency terms. Outputs and inputs are normalised maps; the
/// residuals are formed in physical units and rescaled by the label stds.
inline ModelTerms loss_model(const Volume3D& out_para_n, const Volume3D& out_dia_n, const Volume3D& qsm_n,
                             const Volume3D& field_n, const Volume3D& r2p_n, const DipoleKernel& kernel, double dr,
                             const ModelStats& stats, const Mask3D& mask, ModelTermSelection sel = {}) {
    for (const Volume3D* v : {&out_dia_n, &qsm_n, &field_n, &r2p_n}) detail::require_grid(out_para_n, *v, "loss_model");
    require_mask(out_para_n, mask, "loss_model");
    require(kernel.dims == out_para_n.dims(), ErrorCode::GridMismatch, "loss_model: kernel grid differs");
    return detail::model_terms(out_para_n.data(), out_dia_n.data(), qsm_n.data(), field_n.data(), r2p_n.data(), kernel,
                               dr, stats, mask, sel, 1.0, nullptr, nullptr);
}

inline LossBreakdown combine(double recon, double gradient, const ModelTerms& m, const LossWeights& w) {
    LossBreakdown b{recon, gradient, m.qsm, m.field, m.r2p, 0.0};
    b.total = w.recon * b.recon + w.grad * b.gradient + w.model * (b.model_qsm + b.model_field + b.model_r2p);
    return b;
}

inline LossBreakdown total_loss(const Volume3D& out_para_n, const Volume3D& out_dia_n, const Volume3D& lbl_para_n,
                                const Volume3D& lbl_dia_n, const Volume3D& qsm_n, const Volume3D& field_n,
                                const Volume3D& r2p_n, const DipoleKernel& kernel, double dr, const ModelStats& stats,
                                const Mask3D& mask, const LossWeights& weights = {}, ModelTermSelection sel = {}) {
    const double recon = loss_recon(out_para_n, out_dia_n, lbl_para_n, lbl_dia_n, mask);
    const Volume3D outs[] = {out_para_n, out_dia_n};
    const Volume3D lbls[] = {lbl_para_n, lbl_dia_n};
    const double grad = loss_gradient(outs, lbls, mask);
    const ModelTerms m = loss_model(out_para_n, out_dia_n, qsm_n, field_n, r2p_n, kernel, dr, stats, mask, sel);
    return combine(recon, grad, m, weights);
}

/// L1 plus weighted edge loss for the R2' network.
inline double loss_r2prime_net(const Volume3D& out, const Volume3D& lbl, const Mask3D& mask,
                               const LossWeights& weights = {}) {
    detail::require_grid(out, lbl, "loss_r2prime_net");
    require_mask(out, mask, "loss_r2prime_net");
    std::vector<double> r(out.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = out[i] - lbl[i];
    return weights.l1 * detail::l1_mean(r, mask) +
           weights.grad_r2p * detail::gradient_term(out.data(), lbl.data(), out.dims(), mask);
}

// --- training objectives -------------------------------------------------

/// One training example: normalised network inputs and labels on a patch.
struct TrainingSample {
    std::vector<Volume3D> inputs;
    std::vector<Volume3D> labels;
    Mask3D mask;
    std::shared_ptr<const DipoleKernel> kernel; ///< only needed by objectives with a field term
};

/// chi-separation network: outputs (para, dia). Channel indices point into
/// TrainingSample::inputs; -1 marks an input the network does not receive.
struct ChiSepObjective {
    LossWeights weights;
    double dr = 114.0;
    ModelStats stats;
    int qsm_channel = 0;
    int field_channel = 1;
    int r2p_channel = 2;
};

/// Single-orientation QSM network: field in, chi out; the model term is the
/// dipole consistency of the de-normalised output.
struct QsmNetObjective {
    LossWeights weights;
    NormStats chi;
    NormStats field;
    int field_channel = 0;
};

/// R2* -> R2' network: L1 plus edge loss, no physics term.
struct R2PrimeObjective {
    LossWeights weights;
};

using Objective = std::variant<ChiSepObjective, QsmNetObjective, R2PrimeObjective>;

inline std::size_t objective_outputs(const Objective& obj) {
    return std::holds_alternative<ChiSepObjective>(obj) ? 2 : 1;
}

/// Loss of a sample given network outputs; fills d(total)/d(output) per
/// channel when grad is non-null.
inline LossBreakdown evaluate_objective(const Objective& obj, const TrainingSample& s,
                                        std::span<const Volume3D> outputs,
                                        std::vector<std::vector<double>>* grad = nullptr) {
    const std::size_t nout = objective_outputs(obj);
    require(outputs.size() == nout && s.labels.size() == nout, ErrorCode::ChannelMismatch,
            "objective expects " + std::to_string(nout) + " output channels");
    const Dims d = outputs.front().dims();
    const std::size_t n = d.size();
    for (std::size_t c = 0; c < nout; ++c) {
        detail::require_grid(outputs[c], s.labels[c], "evaluate_objective");
        require_mask(outputs[c], s.mask, "evaluate_objective");
    }
    if (grad) grad->assign(nout, std::vector<double>(n, 0.0));
    auto g = [&](std::size_t c) { return grad ? (*grad)[c].data() : nullptr; };

    auto channel = [&](int idx) -> std::span<const double> {
        if (idx < 0) return {};
        require(static_cast<std::size_t>(idx) < s.inputs.size(), ErrorCode::ChannelMismatch, "input channel missing");
        return s.inputs[static_cast<std::size_t>(idx)].data();
    };

    if (const auto* cs = std::get_if<ChiSepObjective>(&obj)) {
        const LossWeights& w = cs->weights;
        double recon = 0.0, edge = 0.0;
        for (std::size_t c = 0; c < 2; ++c) {
            std::vector<double> r(n);
            for (std::size_t i = 0; i < n; ++i) r[i] = outputs[c][i] - s.labels[c][i];
            recon += detail::l1_mean(r, s.mask, g(c), w.recon);
            edge += detail::gradient_term(outputs[c].data(), s.labels[c].data(), d, s.mask, g(c), w.grad);
        }
        require(s.kernel != nullptr || cs->field_channel < 0, ErrorCode::InvalidArgument,
                "sample carries no dipole kernel");
        const DipoleKernel empty{};
        const ModelTerms m = detail::model_terms(outputs[0].data(), outputs[1].data(), channel(cs->qsm_channel),
                                                 channel(cs->field_channel), channel(cs->r2p_channel),
                                                 s.kernel ? *s.kernel : empty, cs->dr, cs->stats, s.mask, {}, w.model,
                                                 g(0), g(1));
        return combine(recon, edge, m, w);
    }
    if (const auto* qn = std::get_if<QsmNetObjective>(&obj)) {
        const LossWeights& w = qn->weights;
        std::vector<double> r(n);
        for (std::size_t i = 0; i < n; ++i) r[i] = outputs[0][i] - s.labels[0][i];
        const double recon = detail::l1_mean(r, s.mask, g(0), w.recon);
        const double edge = detail::gradient_term(outputs[0].data(), s.labels[0].data(), d, s.mask, g(0), w.grad);
        ModelTerms m;
        const auto field_n = channel(qn->field_channel);
        if (!field_n.empty()) {
            require(s.kernel != nullptr, ErrorCode::InvalidArgument, "sample carries no dipole kernel");
            require(qn->chi.std > 0.0 && qn->field.std > 0.0, ErrorCode::DegenerateStats, "stats need positive std");
            std::vector<double> chi(n);
            for (std::size_t i = 0; i < n; ++i) chi[i] = outputs[0][i] * qn->chi.std + qn->chi.mean;
            const auto conv = detail::kspace_multiply(chi, d, s.kernel->kvals);
            for (std::size_t i = 0; i < n; ++i) r[i] = (conv[i] - (field_n[i] * qn->field.std + qn->field.mean)) / qn->field.std;
            std::vector<double> gr(grad ? n : 0, 0.0);
            m.field = detail::l1_mean(r, s.mask, grad ? gr.data() : nullptr, w.model);
            if (grad) {
                const auto back = detail::kspace_multiply(gr, d, s.kernel->kvals);
                for (std::size_t i = 0; i < n; ++i) (*grad)[0][i] += back[i] * qn->chi.std / qn->field.std;
            }
        }
        return combine(recon, edge, m, w);
    }
    const auto& rp = std::get<R2PrimeObjective>(obj);
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = outputs[0][i] - s.labels[0][i];
    LossBreakdown b;
    b.recon = detail::l1_mean(r, s.mask, g(0), rp.weights.l1);
    b.gradient = detail::gradient_term(outputs[0].data(), s.labels[0].data(), d, s.mask, g(0), rp.weights.grad_r2p);
    b.total = rp.weights.l1 * b.recon + rp.weights.grad_r2p * b.gradient;
    return b;
}

} // namespace chisep
