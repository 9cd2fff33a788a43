// chisep command-line tool. Every command writes a manifest.json next to its
// outputs; errors go to stderr as one JSON object.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "chisep/chisep.hpp"

namespace fs = std::filesystem;
namespace nii = chisep::nifti;
using nlohmann::json;
using namespace chisep;

namespace {

constexpr const char* kVersion = "1.0.0";

// exit status for library errors: 3 for numerical failures, 2 for everything else
int exit_code(ErrorCode c) {
    switch (c) {
    case ErrorCode::DegenerateStats:
    case ErrorCode::DegenerateX:
    case ErrorCode::DivergedLoss:
    case ErrorCode::EmptyResult:
    case ErrorCode::ZeroPeak:
    case ErrorCode::ZeroReference:
    case ErrorCode::ZeroDynamicRange: return 3;
    default: return 2;
    }
}

int report_error(std::string_view code, const std::string& msg, int status) {
    std::cerr << json{{"error", code}, {"message", msg}, {"exit_code", status}}.dump() << "\n";
    return status;
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
    return h;
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCode::BadSpec, p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + p.string());
    out << j.dump(2) << "\n";
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + p.string());
    out << s;
}

json manifest(const std::string& command, json params) {
    return {{"tool", "chisep"},
            {"version", kVersion},
            {"command", command},
            {"gamma_bar_hz_per_tesla", kGammaBarHzPerTesla},
            {"threads", 1},
            {"parameters", std::move(params)}};
}

Vec3 parse_vec3(const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            v.push_back(std::stod(tok));
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidArgument, "bad number '" + tok + "' in direction '" + s + "'");
        }
    }
    require(v.size() == 3, ErrorCode::BadB0, "direction needs three components: '" + s + "'");
    return normalized(Vec3{v[0], v[1], v[2]});
}

json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

Vec3 vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

// Six spread orientations: the main axis, +-30 degree tilts about x and y and
// a compound 20/20 tilt.
std::vector<Vec3> default_orientations() {
    auto tilt = [](double ax, double ay) {
        const double a = ax * std::numbers::pi / 180.0, b = ay * std::numbers::pi / 180.0;
        const Vec3 v{0.0, -std::sin(a), std::cos(a)};
        return normalized(Vec3{v[0] * std::cos(b) + v[2] * std::sin(b), v[1], -v[0] * std::sin(b) + v[2] * std::cos(b)});
    };
    return {tilt(0, 0), tilt(30, 0), tilt(-30, 0), tilt(0, 30), tilt(0, -30), tilt(20, 20)};
}

// --- phantom ------------------------------------------------------------------

Phantom load_phantom(const fs::path& dir) {
    const json m = read_json(dir / "manifest.json");
    Phantom ph;
    ph.chi_para = nii::read_volume(dir / "chi_para.nii");
    ph.chi_dia = nii::read_volume(dir / "chi_dia.nii");
    ph.r2 = nii::read_volume(dir / "r2.nii");
    ph.m0 = nii::read_volume(dir / "m0.nii");
    ph.roi_labels = nii::read_volume(dir / "roi_labels.nii");
    ph.brain_mask = nii::read_mask(dir / "brain_mask.nii");
    ph.csf_mask = nii::read_mask(dir / "csf_mask.nii");
    ph.vessel_mask = nii::read_mask(dir / "vessel_mask.nii");
    ph.dr_true = m.at("parameters").at("dr_true").get<double>();
    for (const Volume3D* v : {&ph.chi_dia, &ph.r2, &ph.m0, &ph.roi_labels})
        require_same_grid(ph.chi_para, *v, "phantom directory");
    return ph;
}

int cmd_phantom(const std::string& spec_path, std::optional<std::uint64_t> seed, const fs::path& out, std::size_t n,
                double dr) {
    PhantomSpec spec;
    std::string source = "brain_like";
    if (!spec_path.empty()) {
        spec = phantom_spec_from_json(read_json(spec_path));
        source = spec_path;
    } else {
        spec = brain_like_spec(n, dr);
    }
    if (seed) spec.seed = *seed;
    const Phantom ph = generate_phantom(spec);
    fs::create_directories(out);
    const int f64 = nii::kFloat64;
    nii::write_volume(out / "chi_para.nii", ph.chi_para, f64);
    nii::write_volume(out / "chi_dia.nii", ph.chi_dia, f64);
    nii::write_volume(out / "chi_total.nii", ph.chi_total(), f64);
    nii::write_volume(out / "r2.nii", ph.r2, f64);
    nii::write_volume(out / "m0.nii", ph.m0, f64);
    nii::write_volume(out / "roi_labels.nii", ph.roi_labels, f64);
    const Volume3D r2p = true_r2prime(ph);
    nii::write_volume(out / "r2prime.nii", r2p, f64);
    std::vector<double> r2s(r2p.size());
    for (std::size_t i = 0; i < r2s.size(); ++i) r2s[i] = ph.r2[i] + r2p[i];
    nii::write_volume(out / "r2star.nii", r2p.with_data(std::move(r2s)), f64);
    const auto k = build_kernel_for(ph.chi_para);
    nii::write_volume(out / "field.nii", true_field(ph, k), f64);
    nii::write_volume(out / "brain_mask.nii", ph.brain_mask.to_volume(spec.voxel_size));
    nii::write_volume(out / "csf_mask.nii", ph.csf_mask.to_volume(spec.voxel_size));
    nii::write_volume(out / "vessel_mask.nii", ph.vessel_mask.to_volume(spec.voxel_size));

    const json sj = to_json(spec);
    write_json(out / "spec.json", sj);
    write_json(out / "dataset.json",
               {{"mask", "brain_mask.nii"},
                {"dr", spec.dr_true},
                {"maps",
                 {{"qsm", "chi_total.nii"},
                  {"field", "field.nii"},
                  {"r2prime", "r2prime.nii"},
                  {"r2star", "r2star.nii"},
                  {"chi_para", "chi_para.nii"},
                  {"chi_dia", "chi_dia.nii"},
                  {"chi_total", "chi_total.nii"}}}});
    write_json(out / "manifest.json", manifest("phantom", {{"spec_source", source},
                                                           {"spec_hash_fnv1a", hex(fnv1a(sj.dump()))},
                                                           {"seed", spec.seed},
                                                           {"dr_true", spec.dr_true},
                                                           {"dims", {spec.dims.nx, spec.dims.ny, spec.dims.nz}}}));
    std::cout << "phantom " << spec.dims.nx << "x" << spec.dims.ny << "x" << spec.dims.nz << " written to " << out
              << "\n";
    return 0;
}

// --- forward -----------------------------------------------------------------

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            v.push_back(std::stod(tok));
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidArgument, "bad number '" + tok + "' in list '" + s + "'");
        }
    }
    return v;
}

int cmd_forward(const fs::path& phantom_dir, const fs::path& out, const std::string& tes_ms,
                const std::vector<std::string>& dirs_in, std::size_t orientations, double b0_tesla, double snr,
                std::uint64_t seed) {
    const Phantom ph = load_phantom(phantom_dir);
    std::vector<double> tes = default_gre_echo_times();
    if (!tes_ms.empty()) {
        tes = parse_list(tes_ms);
        for (auto& t : tes) t *= 1e-3;
    }
    std::vector<Vec3> dirs;
    for (const auto& d : dirs_in) dirs.push_back(parse_vec3(d));
    if (dirs.empty()) {
        const auto all = default_orientations();
        require(orientations >= 1 && orientations <= all.size(), ErrorCode::InvalidArgument,
                "--orientations must lie in [1, 6]; pass --b0-dir for other sets");
        dirs.assign(all.begin(), all.begin() + static_cast<long>(orientations));
    }
    const double noise = snr > 0.0 ? snr : std::numeric_limits<double>::infinity();
    fs::create_directories(out);
    json orients = json::array();
    for (std::size_t o = 0; o < dirs.size(); ++o) {
        const auto k = build_kernel(ph.dims(), ph.chi_para.voxel_size(), dirs[o]);
        const auto gre = synthesize_gre(ph, k, tes, b0_tesla, noise, seed + o);
        const std::string stem = "orient" + std::to_string(o);
        nii::write_file_bytes(out / (stem + "_gre_mag.nii"), nii::write_nifti_series(gre, false, nii::kFloat64));
        nii::write_file_bytes(out / (stem + "_gre_phase.nii"), nii::write_nifti_series(gre, true, nii::kFloat64));
        orients.push_back({{"b0_dir", vec_json(dirs[o])},
                           {"magnitude", stem + "_gre_mag.nii"},
                           {"phase", stem + "_gre_phase.nii"},
                           {"noise_seed", seed + o}});
    }
    const auto se_tes = default_se_echo_times();
    const auto se = synthesize_se(ph, se_tes, noise, seed + 1000);
    nii::write_file_bytes(out / "se_mag.nii", nii::write_nifti_series(se, false, nii::kFloat64));
    json params{{"phantom_dir", fs::absolute(phantom_dir).string()},
                {"echo_times_s", tes},
                {"se_echo_times_s", se_tes},
                {"b0_tesla", b0_tesla},
                {"hz_per_ppm", hz_per_ppm(b0_tesla)},
                {"snr", snr > 0.0 ? json(snr) : json("inf")},
                {"seed", seed},
                {"orientations", orients},
                {"se_magnitude", "se_mag.nii"}};
    write_json(out / "manifest.json", manifest("forward", params));
    std::cout << dirs.size() << " orientation(s) and SE series written to " << out << "\n";
    return 0;
}

// --- recon --------------------------------------------------------------------

MultiEchoSeries load_series(const fs::path& dir, const json& o, const std::vector<double>& tes, double b0_tesla) {
    auto mag = std::get<MultiEchoSeries>(nii::read_nifti_file(dir / o.at("magnitude").get<std::string>()).content);
    MultiEchoSeries s;
    s.echo_times = tes;
    s.magnitude = std::move(mag.magnitude);
    s.b0_tesla = b0_tesla;
    if (o.contains("phase")) {
        auto ph = std::get<MultiEchoSeries>(nii::read_nifti_file(dir / o.at("phase").get<std::string>()).content);
        s.phase = std::move(ph.phase);
        s.wrapped = true;
    }
    s.validate();
    return s;
}

struct SeriesSet {
    json params;
    std::vector<MultiEchoSeries> gre;
    std::vector<Vec3> dirs;
    MultiEchoSeries se;
    double b0_tesla = 3.0;
};

SeriesSet load_series_set(const fs::path& dir) {
    SeriesSet s;
    s.params = read_json(dir / "manifest.json").at("parameters");
    s.b0_tesla = s.params.at("b0_tesla").get<double>();
    const auto tes = s.params.at("echo_times_s").get<std::vector<double>>();
    for (const auto& o : s.params.at("orientations")) {
        s.gre.push_back(load_series(dir, o, tes, s.b0_tesla));
        s.dirs.push_back(vec_from(o.at("b0_dir")));
    }
    s.se = load_series(dir, {{"magnitude", s.params.at("se_magnitude")}},
                       s.params.at("se_echo_times_s").get<std::vector<double>>(), s.b0_tesla);
    return s;
}

Volume3D local_field_ppm(const MultiEchoSeries& gre, const Vec3& b0) {
    const Volume3D hz = combine_echoes_weighted(temporal_unwrap(gre));
    return field_hz_to_ppm(hz, gre.b0_tesla).with_b0(b0);
}

// Mean over orientations of the R2' estimate; the tissue R2' does not
// depend on orientation in this forward model.
Volume3D measured_r2prime(const SeriesSet& s, bool arlo, Volume3D* r2star_out) {
    const Volume3D r2 = fit_r2(s.se);
    std::vector<double> acc(r2.size(), 0.0), r2s_acc(r2.size(), 0.0);
    for (const auto& g : s.gre) {
        const Volume3D r2s = arlo ? fit_r2star_arlo(g) : fit_r2star_loglinear(g);
        const Volume3D r2p = compute_r2prime(r2s, r2);
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += r2p[i] / double(s.gre.size());
            r2s_acc[i] += r2s[i] / double(s.gre.size());
        }
    }
    if (r2star_out) *r2star_out = r2.with_data(std::move(r2s_acc)).with_unit(Unit::per_second);
    return r2.with_data(std::move(acc)).with_unit(Unit::per_second);
}

Mask3D recon_mask(const std::string& mask_path, const SeriesSet& s) {
    if (!mask_path.empty()) return nii::read_mask(mask_path);
    return nii::read_mask(fs::path(s.params.at("phantom_dir").get<std::string>()) / "brain_mask.nii");
}

int cmd_recon(const fs::path& series_dir, const std::string& method, const fs::path& out, double epsilon,
              double threshold, double dr, const std::string& mask_path) {
    const SeriesSet s = load_series_set(series_dir);
    fs::create_directories(out);
    const int f64 = nii::kFloat64;
    json params{{"series_dir", fs::absolute(series_dir).string()}, {"method", method}};
    std::vector<std::string> written;
    auto put = [&](const std::string& name, const Volume3D& v) {
        nii::write_volume(out / (name + ".nii"), v, f64);
        written.push_back(name + ".nii");
    };
    auto fields = [&] {
        std::vector<OrientedField> f;
        for (std::size_t o = 0; o < s.gre.size(); ++o) f.push_back({local_field_ppm(s.gre[o], s.dirs[o]), s.dirs[o]});
        return f;
    };

    if (method == "arlo" || method == "loglin") {
        Volume3D r2s;
        const Volume3D r2p = measured_r2prime(s, method == "arlo", &r2s);
        put("r2star", r2s);
        put("r2", fit_r2(s.se));
        put("r2prime", r2p);
    } else if (method == "cosmos") {
        const auto f = fields();
        put("qsm", cosmos(f, CosmosOptions{epsilon, false}));
        put("field", f.front().field);
        params["epsilon"] = epsilon;
    } else if (method == "chisep-cosmos") {
        const auto f = fields();
        Volume3D r2s;
        const Volume3D r2p = measured_r2prime(s, true, &r2s);
        const Mask3D mask = recon_mask(mask_path, s);
        const auto sm = chi_sep_cosmos(f, r2p, dr, mask, epsilon);
        put("chi_para", sm.chi_para);
        put("chi_dia", sm.chi_dia);
        put("qsm", cosmos(f, CosmosOptions{epsilon, false}));
        put("field", f.front().field);
        put("r2prime", r2p);
        put("r2star", r2s);
        params["epsilon"] = epsilon;
        params["dr"] = dr;
    } else if (method == "tkd" || method == "chisep-single") {
        const Volume3D field = local_field_ppm(s.gre.front(), s.dirs.front());
        const auto k = build_kernel(field.dims(), field.voxel_size(), s.dirs.front());
        put("field", field);
        if (method == "tkd") {
            put("qsm", tkd_invert(field, k, threshold));
        } else {
            Volume3D r2s;
            const Volume3D r2p = measured_r2prime(s, true, &r2s);
            const auto sm = chi_sep_single(field, r2p, dr, k, threshold, recon_mask(mask_path, s));
            put("chi_para", sm.chi_para);
            put("chi_dia", sm.chi_dia);
            put("r2prime", r2p);
            put("r2star", r2s);
            params["dr"] = dr;
        }
        params["threshold"] = threshold;
    } else {
        fail(ErrorCode::InvalidArgument, "unknown method '" + method + "'");
    }
    params["outputs"] = written;
    write_json(out / "manifest.json", manifest("recon", params));
    std::cout << method << ": wrote " << written.size() << " map(s) to " << out << "\n";
    return 0;
}

// --- train --------------------------------------------------------------------

struct TrainSettings {
    TrainConfig tc;
    std::vector<std::size_t> hidden{8, 8};
    std::size_t kernel_size = 3;
    std::size_t patch = 64;
    std::size_t overlap = 40;
    std::vector<double> rotations;
    LossWeights weights;
    std::string loss_mask = "brain";
    std::vector<std::string> inputs;
    std::uint64_t net_seed = 0;
};

TrainSettings train_settings(const std::string& path) {
    TrainSettings t;
    if (path.empty()) return t;
    const json j = read_json(path);
    try {
        t.tc.learning_rate = j.value("learning_rate", t.tc.learning_rate);
        t.tc.rho = j.value("rho", t.tc.rho);
        t.tc.step_size = j.value("step_size", t.tc.step_size);
        t.tc.gamma = j.value("gamma", t.tc.gamma);
        t.tc.batch_size = j.value("batch_size", t.tc.batch_size);
        t.tc.max_steps = j.value("steps", t.tc.max_steps);
        t.tc.seed = j.value("seed", t.tc.seed);
        t.net_seed = j.value("net_seed", t.tc.seed);
        t.hidden = j.value("hidden", t.hidden);
        t.kernel_size = j.value("kernel_size", t.kernel_size);
        t.patch = j.value("patch", t.patch);
        t.overlap = j.value("overlap", t.overlap);
        t.rotations = j.value("rotations_deg", t.rotations);
        t.loss_mask = j.value("loss_mask", t.loss_mask);
        t.inputs = j.value("inputs", t.inputs);
        if (j.contains("weights")) {
            const auto& w = j.at("weights");
            t.weights.recon = w.value("recon", t.weights.recon);
            t.weights.grad = w.value("grad", t.weights.grad);
            t.weights.model = w.value("model", t.weights.model);
            t.weights.l1 = w.value("l1", t.weights.l1);
            t.weights.grad_r2p = w.value("grad_r2p", t.weights.grad_r2p);
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::BadSpec, path + ": " + e.what());
    }
    require(t.loss_mask == "brain" || t.loss_mask == "full", ErrorCode::BadSpec, "loss_mask must be brain or full");
    t.tc.validate();
    return t;
}

json train_settings_json(const TrainSettings& t) {
    return {{"learning_rate", t.tc.learning_rate},
            {"rho", t.tc.rho},
            {"step_size", t.tc.step_size},
            {"gamma", t.tc.gamma},
            {"batch_size", t.tc.batch_size},
            {"steps", t.tc.max_steps},
            {"seed", t.tc.seed},
            {"net_seed", t.net_seed},
            {"hidden", t.hidden},
            {"kernel_size", t.kernel_size},
            {"patch", t.patch},
            {"overlap", t.overlap},
            {"rotations_deg", t.rotations},
            {"loss_mask", t.loss_mask},
            {"inputs", t.inputs},
            {"weights",
             {{"recon", t.weights.recon},
              {"grad", t.weights.grad},
              {"model", t.weights.model},
              {"l1", t.weights.l1},
              {"grad_r2p", t.weights.grad_r2p}}}};
}

int cmd_train(const fs::path& dataset, const std::string& net_kind, const std::string& config, const fs::path& out) {
    const json ds = read_json(dataset);
    const fs::path base = dataset.parent_path();
    TrainSettings t = train_settings(config);
    auto map = [&](const std::string& name) {
        require(ds.at("maps").contains(name), ErrorCode::BadSpec, "dataset has no '" + name + "' map");
        return nii::read_volume(base / ds.at("maps").at(name).get<std::string>());
    };
    const Mask3D brain = nii::read_mask(base / ds.at("mask").get<std::string>());
    const Mask3D loss_mask = t.loss_mask == "full" ? Mask3D::full(brain.dims) : brain;

    std::vector<std::string> in_names, out_names;
    if (net_kind == "chisep") {
        in_names = t.inputs.empty() ? default_chisep_inputs() : t.inputs;
        out_names = {"chi_para", "chi_dia"};
    } else if (net_kind == "qsmnet") {
        in_names = {"field"};
        out_names = {"chi_total"};
    } else if (net_kind == "r2primenet") {
        in_names = {"r2star"};
        out_names = {"r2prime"};
    } else {
        fail(ErrorCode::InvalidArgument, "unknown net '" + net_kind + "'");
    }

    std::map<std::string, std::pair<Volume3D, NormStats>> norm;
    auto normed = [&](const std::string& n) -> const std::pair<Volume3D, NormStats>& {
        auto it = norm.find(n);
        if (it == norm.end()) it = norm.emplace(n, normalize(map(n), brain)).first;
        return it->second;
    };
    std::vector<Volume3D> inputs, labels;
    std::vector<NormStats> in_stats, out_stats;
    for (const auto& n : in_names) {
        inputs.push_back(normed(n).first);
        in_stats.push_back(normed(n).second);
    }
    for (const auto& n : out_names) {
        labels.push_back(normed(n).first);
        out_stats.push_back(normed(n).second);
    }

    NetConfig cfg;
    cfg.in_channels = inputs.size();
    cfg.out_channels = labels.size();
    cfg.hidden = t.hidden;
    cfg.kernel_size = t.kernel_size;
    cfg.seed = t.net_seed;
    cfg.nonnegative_output = net_kind != "qsmnet";
    if (cfg.nonnegative_output)
        for (const auto& s : out_stats) cfg.output_floor.push_back(-s.mean / s.std);
    cfg.input_names = in_names;
    cfg.output_names = out_names;

    Objective obj;
    if (net_kind == "chisep") {
        ChiSepObjective o;
        o.weights = t.weights;
        o.dr = ds.value("dr", 114.0);
        o.stats = {normed("chi_para").second, normed("chi_dia").second, normed("qsm").second,
                   normed("field").second, normed("r2prime").second};
        auto channel = [&](const char* n) {
            const auto it = std::find(in_names.begin(), in_names.end(), n);
            return it == in_names.end() ? -1 : int(it - in_names.begin());
        };
        o.qsm_channel = channel("qsm");
        o.field_channel = channel("field");
        o.r2p_channel = channel("r2prime");
        obj = o;
    } else if (net_kind == "qsmnet") {
        obj = QsmNetObjective{t.weights, normed("chi_total").second, normed("field").second, 0};
    } else {
        obj = R2PrimeObjective{t.weights};
    }

    const Dims d = brain.dims;
    // patches larger than the volume are clamped to it
    const Dims patch{std::min(t.patch, d.nx), std::min(t.patch, d.ny), std::min(t.patch, d.nz)};
    const std::size_t overlap = std::min({t.overlap, patch.nx - 1, patch.ny - 1, patch.nz - 1});
    if (t.loss_mask == "full" && !t.rotations.empty())
        fail(ErrorCode::InvalidArgument, "rotation augmentation needs the brain loss mask");
    const auto samples =
        build_samples(inputs, labels, loss_mask, patch, overlap, t.rotations, net_kind != "r2primenet");

    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train(make_net(cfg), samples, obj, t.tc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(out);
    save_checkpoint(out / "model.json", TrainedModel{res.net, in_stats, out_stats, res.steps});
    std::ostringstream csv;
    csv << "step,total,recon,gradient,model_qsm,model_field,model_r2p\n";
    csv.precision(10);
    for (std::size_t i = 0; i < res.history.size(); ++i) {
        const auto& h = res.history[i];
        csv << i << "," << h.total << "," << h.recon << "," << h.gradient << "," << h.model_qsm << ","
            << h.model_field << "," << h.model_r2p << "\n";
    }
    write_text(out / "loss_history.csv", csv.str());
    const double final_loss = dataset_loss(res.net, obj, samples).total;
    json params{{"dataset", fs::absolute(dataset).string()},
                {"net", net_kind},
                {"config", train_settings_json(t)},
                {"patch", {patch.nx, patch.ny, patch.nz}},
                {"effective_overlap", overlap},
                {"samples", samples.size()},
                {"initial_loss", res.history.empty() ? 0.0 : res.history.front().total},
                {"final_loss", final_loss},
                {"seconds", secs},
                {"checkpoint", "model.json"}};
    write_json(out / "manifest.json", manifest("train", params));
    std::cout << net_kind << ": " << res.steps << " steps, loss " << params["initial_loss"].get<double>() << " -> "
              << final_loss << "\n";
    return 0;
}

// --- infer --------------------------------------------------------------------

int cmd_infer(const fs::path& in, const std::string& pipeline, const std::string& chisep_ckpt,
              const std::string& r2p_ckpt, const fs::path& out) {
    require(!chisep_ckpt.empty(), ErrorCode::InvalidArgument, "--chisep checkpoint is required");
    const TrainedModel chisep = load_checkpoint(chisep_ckpt);
    const Volume3D qsm = nii::read_volume(in / "qsm.nii");
    const Volume3D field = nii::read_volume(in / "field.nii");
    SourceMaps sm;
    if (pipeline == "r2prime") {
        sm = infer_chisep_r2prime(qsm, field, nii::read_volume(in / "r2prime.nii"), chisep);
    } else if (pipeline == "r2star") {
        require(!r2p_ckpt.empty(), ErrorCode::InvalidArgument, "--r2prime-net checkpoint is required for r2star");
        const Volume3D r2s = nii::read_volume(in / "r2star.nii");
        require_same_grid(qsm, field, "infer");
        sm = infer_chisep_r2star(qsm, field, r2s, load_checkpoint(r2p_ckpt), chisep);
    } else {
        fail(ErrorCode::InvalidArgument, "unknown pipeline '" + pipeline + "'");
    }
    fs::create_directories(out);
    nii::write_volume(out / "chi_para.nii", sm.chi_para, nii::kFloat64);
    nii::write_volume(out / "chi_dia.nii", sm.chi_dia, nii::kFloat64);
    write_json(out / "manifest.json", manifest("infer", {{"inputs", fs::absolute(in).string()},
                                                         {"pipeline", pipeline},
                                                         {"chisep_checkpoint", chisep_ckpt},
                                                         {"r2prime_checkpoint", r2p_ckpt}}));
    std::cout << pipeline << " pipeline: chi_para/chi_dia written to " << out << "\n";
    return 0;
}

// --- eval ---------------------------------------------------------------------

int cmd_eval(const fs::path& test, const fs::path& ref, const std::string& mask_path, const std::string& csf,
             const std::string& vessel, const std::string& roi, const std::vector<std::string>& maps,
             const fs::path& out, const HfenOptions& ho, const SsimOptions& so) {
    std::vector<std::pair<std::string, std::pair<fs::path, fs::path>>> pairs;
    if (fs::is_directory(test)) {
        std::vector<std::string> names = maps;
        if (names.empty())
            for (const auto& e : fs::directory_iterator(test))
                if (e.path().extension() == ".nii" && fs::exists(ref / e.path().filename()))
                    names.push_back(e.path().stem().string());
        std::sort(names.begin(), names.end());
        for (const auto& n : names) pairs.push_back({n, {test / (n + ".nii"), ref / (n + ".nii")}});
    } else {
        pairs.push_back({test.stem().string(), {test, ref}});
    }
    require(!pairs.empty(), ErrorCode::InvalidArgument, "no map pairs to evaluate");
    require(!mask_path.empty(), ErrorCode::InvalidArgument, "--mask is required");
    Mask3D mask = nii::read_mask(mask_path);
    if (!csf.empty() || !vessel.empty()) {
        const Mask3D c = csf.empty() ? Mask3D(mask.dims) : nii::read_mask(csf);
        const Mask3D v = vessel.empty() ? Mask3D(mask.dims) : nii::read_mask(vessel);
        mask = eval_mask(mask, c, v);
    }
    std::optional<Volume3D> labels;
    if (!roi.empty()) labels = nii::read_volume(roi);

    fs::create_directories(out);
    json report{{"mask_voxels", mask.count()},
                {"hfen", {{"size", ho.size}, {"sigma", ho.sigma}}},
                {"ssim", {{"size", so.size}, {"sigma", so.sigma}, {"k1", so.k1}, {"k2", so.k2}}},
                {"maps", json::object()}};
    std::ostringstream csv;
    csv.precision(10);
    csv << "map,psnr_db,nrmse_percent,hfen_percent,ssim,mask_voxels\n";
    for (const auto& [name, files] : pairs) {
        const Volume3D x = nii::read_volume(files.first), r = nii::read_volume(files.second);
        require(x.dims() == r.dims(), ErrorCode::GridMismatch, name + ": test and reference grids differ");
        const Volume3D xr = x.with_b0(r.b0_dir()).with_unit(r.unit());
        const MetricReport m = evaluate(xr, r, mask, ho, so);
        json entry = to_json(m);
        if (labels) {
            const RoiReport rr = roi_report(xr, r, *labels, &mask);
            entry["roi"] = to_json(rr);
            write_text(out / ("roi_" + name + ".csv"), roi_csv(rr));
        }
        report["maps"][name] = entry;
        csv << name << "," << (std::isinf(m.psnr_db) ? std::string("inf") : std::to_string(m.psnr_db)) << ","
            << m.nrmse_percent << "," << m.hfen_percent << "," << m.ssim << "," << m.mask_voxels << "\n";
        std::printf("%-10s NRMSE %8.4f%%  HFEN %8.4f%%  SSIM %.5f  pSNR %s dB\n", name.c_str(), m.nrmse_percent,
                    m.hfen_percent, m.ssim,
                    std::isinf(m.psnr_db) ? "inf" : std::to_string(m.psnr_db).c_str());
    }
    write_json(out / "report.json", report);
    write_text(out / "metrics.csv", csv.str());
    write_json(out / "manifest.json", manifest("eval", {{"test", fs::absolute(test).string()},
                                                        {"ref", fs::absolute(ref).string()},
                                                        {"mask", mask_path},
                                                        {"csf", csf},
                                                        {"vessel", vessel},
                                                        {"roi", roi},
                                                        {"hfen", report["hfen"]},
                                                        {"ssim", report["ssim"]}}));
    return 0;
}

// --- selftest -----------------------------------------------------------------

struct Check {
    const char* name;
    std::function<std::pair<bool, std::string>()> run;
};

std::string num(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Volume3D noise_volume(Dims d, std::uint64_t seed, Vec3 b0 = {0, 0, 1}) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(d.size());
    for (auto& x : v) x = u(rng);
    return Volume3D(d, std::move(v), {1, 1, 1}, Unit::dimensionless, b0);
}

double nrmse_full(const Volume3D& x, const Volume3D& r) { return nrmse(x, r, Mask3D::full(x.dims())); }

int cmd_selftest() {
    const std::vector<Check> checks{
        {"dipole forward vs spatial oracle",
         [] {
             double worst = 0.0;
             for (std::size_t n : {6, 8})
                 for (const Vec3& b : {Vec3{0, 0, 1}, normalized(Vec3{0.3, -0.2, 1.0})}) {
                     const auto chi = noise_volume({n, n, n}, n, b);
                     const auto f = forward_field(chi, build_kernel_for(chi));
                     const auto o = dipole_spatial_oracle(chi);
                     for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, std::abs(f[i] - o[i]));
                 }
             return std::pair{worst < 1e-10, num("max abs err %.1e", worst)};
         }},
        {"kernel analytic values",
         [] {
             const Vec3 b{0, 0, 1};
             const double m = std::acos(1.0 / std::sqrt(3.0));
             const double e = std::max({std::abs(dipole_response({0, 0, 2}, b) + 2.0 / 3.0),
                                        std::abs(dipole_response({1, 0, 0}, b) - 1.0 / 3.0),
                                        std::abs(dipole_response({std::sin(m), 0, std::cos(m)}, b))});
             return std::pair{e <= 1e-12, num("max err %.1e", e)};
         }},
        {"COSMOS loop closure",
         [] {
             const auto ph = generate_phantom(brain_like_spec(24), 0);
             std::vector<OrientedField> f;
             for (const auto& b : default_orientations())
                 f.push_back({true_field(ph, build_kernel(ph.dims(), {1, 1, 1}, b)), b});
             const double e = nrmse_full(cosmos(f), ph.chi_total());
             return std::pair{e < 2.0, num("NRMSE %.3f%%", e)};
         }},
        {"echo combination loop closure",
         [] {
             const auto ph = generate_phantom(brain_like_spec(24), 0);
             const auto k = build_kernel(ph.dims(), {1, 1, 1}, default_orientations()[1]);
             const auto g = synthesize_gre(ph, k, default_gre_echo_times(), 3.0);
             const auto f = combine_echoes_weighted(temporal_unwrap(g));
             const double e = nrmse(f, field_ppm_to_hz(true_field(ph, k), 3.0), ph.brain_mask);
             return std::pair{e < 0.1, num("NRMSE %.1e%%", e)};
         }},
        {"loss closure at ground truth",
         [] {
             const auto ph = generate_phantom(brain_like_spec(16), 0);
             const auto k = build_kernel_for(ph.chi_para);
             const Mask3D& m = ph.brain_mask;
             auto [p, ps] = normalize(ph.chi_para, m);
             auto [d, ds] = normalize(ph.chi_dia, m);
             auto [q, qs] = normalize(ph.chi_total(), m);
             auto [f, fs_] = normalize(true_field(ph, k), m);
             auto [r, rs] = normalize(true_r2prime(ph), m);
             const auto t = loss_model(p, d, q, f, r, k, ph.dr_true, {ps, ds, qs, fs_, rs}, m);
             const double w = std::max({t.qsm, t.field, t.r2p});
             return std::pair{w < 1e-9, num("max term %.1e", w)};
         }},
        {"parameter gradient check",
         [] {
             const Dims d{6, 6, 6};
             std::vector<Volume3D> in{noise_volume(d, 1), noise_volume(d, 2), noise_volume(d, 3)};
             std::vector<Volume3D> lb{noise_volume(d, 4), noise_volume(d, 5)};
             TrainingSample s{in, lb, Mask3D::full(d), std::make_shared<const DipoleKernel>(build_kernel_for(in[0]))};
             ChiSepObjective obj;
             obj.stats = {{0.05, 0.04}, {0.03, 0.02}, {0.0, 0.05}, {0.0, 0.01}, {8.0, 4.0}};
             NetConfig c;
             c.hidden = {3, 3};
             c.seed = 5;
             const auto net = make_net(c);
             const auto [loss, g] = sample_gradient(net, obj, s);
             auto p = net.flatten();
             auto work = net;
             double worst = 0.0;
             for (std::size_t k = 0; k < p.size(); ++k) {
                 const double x0 = p[k], h = 1e-5;
                 p[k] = x0 + h;
                 work.assign(p);
                 const double up = evaluate_objective(obj, s, forward(work, s.inputs)).total;
                 p[k] = x0 - h;
                 work.assign(p);
                 const double dn = evaluate_objective(obj, s, forward(work, s.inputs)).total;
                 p[k] = x0;
                 const double fd = (up - dn) / (2 * h);
                 worst = std::max(worst, std::abs(fd - g[k]) / std::max({std::abs(fd), std::abs(g[k]), 1e-6}));
             }
             return std::pair{worst < 1e-4, num("max rel err %.1e", worst)};
         }},
        {"metrics self comparison",
         [] {
             const auto ph = generate_phantom(brain_like_spec(16), 0);
             const auto r = evaluate(ph.chi_para, ph.chi_para, ph.brain_mask);
             const bool ok = r.nrmse_percent == 0.0 && r.hfen_percent == 0.0 && std::abs(r.ssim - 1.0) < 1e-12;
             return std::pair{ok, num("SSIM %.12f", r.ssim)};
         }},
        {"NIfTI float32 round trip",
         [] {
             auto v = noise_volume({5, 4, 3}, 9);
             for (auto& x : v.data()) x = double(float(x));
             const auto back = std::get<Volume3D>(nii::read_nifti(nii::write_nifti(v)).content);
             const bool ok = back.values() == v.values();
             return std::pair{ok, std::string(ok ? "bit-identical" : "differs")};
         }},
        {"patch offsets",
         [] {
             const auto s = patch_starts(88, 64, 40);
             return std::pair{s == std::vector<std::size_t>{0, 24}, std::string("88/64/40")};
         }},
    };
    int failed = 0;
    for (const auto& c : checks) {
        std::pair<bool, std::string> r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, e.what()};
        }
        failed += !r.first;
        std::printf("%-34s %s  %s\n", c.name, r.first ? "PASS" : "FAIL", r.second.c_str());
    }
    std::printf("%zu/%zu checks passed\n", checks.size() - std::size_t(failed), checks.size());
    return failed ? 3 : 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"chi-separation QSM toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    int threads = 1;
    app.add_option("--threads", threads, "worker cap (computation is single-threaded)")->check(CLI::PositiveNumber);

    auto* ph = app.add_subcommand("phantom", "generate a phantom and write its maps");
    std::string spec_path;
    std::optional<std::uint64_t> seed;
    std::string ph_out;
    std::size_t ph_n = 32;
    double ph_dr = 114.0;
    ph->add_option("spec", spec_path, "phantom spec JSON (default: built-in brain-like phantom)");
    ph->add_option("--seed", seed, "override the spec seed");
    ph->add_option("--size", ph_n, "grid size of the built-in phantom")->check(CLI::Range(16, 512));
    ph->add_option("--dr", ph_dr, "D_r of the built-in phantom in Hz/ppm");
    ph->add_option("--out", ph_out, "output directory")->required();

    auto* fw = app.add_subcommand("forward", "synthesize GRE and SE series per orientation");
    std::string fw_in, fw_out, tes;
    std::vector<std::string> dirs;
    std::size_t n_orient = 6;
    double b0t = 3.0, snr = 0.0;
    std::uint64_t fw_seed = 0;
    fw->add_option("phantom", fw_in, "phantom directory")->required()->check(CLI::ExistingDirectory);
    fw->add_option("--out", fw_out, "output directory")->required();
    fw->add_option("--tes", tes, "comma separated echo times in ms (default 7.7 + 5.03 k, 6 echoes)");
    fw->add_option("--b0-dir", dirs, "B0 direction x,y,z; repeat per orientation");
    fw->add_option("--orientations", n_orient, "number of built-in orientations when --b0-dir is absent");
    fw->add_option("--b0-tesla", b0t, "field strength in T");
    fw->add_option("--snr", snr, "max(m0)/sigma; 0 means noiseless");
    fw->add_option("--seed", fw_seed, "noise seed");

    auto* rc = app.add_subcommand("recon", "classical reconstruction stages");
    std::string rc_in, rc_out, method = "chisep-cosmos", rc_mask;
    double eps = 1e-6, thr = 0.1, dr = 114.0;
    rc->add_option("series", rc_in, "forward output directory")->required()->check(CLI::ExistingDirectory);
    rc->add_option("--method", method, "arlo|loglin|cosmos|chisep-cosmos|tkd|chisep-single")
        ->check(CLI::IsMember({"arlo", "loglin", "cosmos", "chisep-cosmos", "tkd", "chisep-single"}));
    rc->add_option("--out", rc_out, "output directory")->required();
    rc->add_option("--epsilon", eps, "COSMOS Tikhonov constant");
    rc->add_option("--threshold", thr, "TKD threshold in (0, 2/3)");
    rc->add_option("--dr", dr, "relaxometric constant D_r in Hz/ppm");
    rc->add_option("--mask", rc_mask, "brain mask (default: the phantom's)");

    auto* tr = app.add_subcommand("train", "train a toy network");
    std::string tr_ds, tr_net = "chisep", tr_cfg, tr_out;
    tr->add_option("dataset", tr_ds, "dataset manifest (dataset.json)")->required()->check(CLI::ExistingFile);
    tr->add_option("--net", tr_net, "chisep|qsmnet|r2primenet")->check(CLI::IsMember({"chisep", "qsmnet", "r2primenet"}));
    tr->add_option("--config", tr_cfg, "training config JSON")->check(CLI::ExistingFile);
    tr->add_option("--out", tr_out, "output directory")->required();

    auto* inf = app.add_subcommand("infer", "run a trained pipeline");
    std::string inf_in, pipeline = "r2prime", ck_chisep, ck_r2p, inf_out;
    inf->add_option("inputs", inf_in, "directory with qsm.nii, field.nii and r2prime.nii or r2star.nii")
        ->required()
        ->check(CLI::ExistingDirectory);
    inf->add_option("--pipeline", pipeline, "r2prime|r2star")->check(CLI::IsMember({"r2prime", "r2star"}));
    inf->add_option("--chisep", ck_chisep, "chi-separation checkpoint manifest");
    inf->add_option("--r2prime-net", ck_r2p, "R2* -> R2' checkpoint manifest");
    inf->add_option("--out", inf_out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "metrics against a reference");
    std::string ev_test, ev_ref, ev_mask, ev_csf, ev_ves, ev_roi, ev_out;
    std::vector<std::string> ev_maps;
    HfenOptions ho;
    SsimOptions so;
    ev->add_option("test", ev_test, "test map or directory")->required();
    ev->add_option("ref", ev_ref, "reference map or directory")->required();
    ev->add_option("--mask", ev_mask, "brain mask")->required();
    ev->add_option("--csf", ev_csf, "CSF mask to exclude");
    ev->add_option("--vessel", ev_ves, "vessel mask to exclude");
    ev->add_option("--roi", ev_roi, "ROI label map");
    ev->add_option("--maps", ev_maps, "map names to compare when given directories")->delimiter(',');
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--hfen-size", ho.size, "LoG kernel size");
    ev->add_option("--hfen-sigma", ho.sigma, "LoG sigma in voxels");
    ev->add_option("--ssim-size", so.size, "SSIM window size");
    ev->add_option("--ssim-sigma", so.sigma, "SSIM window sigma");
    ev->add_option("--ssim-k1", so.k1, "SSIM K1");
    ev->add_option("--ssim-k2", so.k2, "SSIM K2");

    auto* st = app.add_subcommand("selftest", "oracle checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("UsageError", e.what(), 2);
    }

    try {
        if (*ph) return cmd_phantom(spec_path, seed, ph_out, ph_n, ph_dr);
        if (*fw) return cmd_forward(fw_in, fw_out, tes, dirs, n_orient, b0t, snr, fw_seed);
        if (*rc) return cmd_recon(rc_in, method, rc_out, eps, thr, dr, rc_mask);
        if (*tr) return cmd_train(tr_ds, tr_net, tr_cfg, tr_out);
        if (*inf) return cmd_infer(inf_in, pipeline, ck_chisep, ck_r2p, inf_out);
        if (*ev) return cmd_eval(ev_test, ev_ref, ev_mask, ev_csf, ev_ves, ev_roi, ev_maps, ev_out, ho, so);
        if (*st) return cmd_selftest();
    } catch (const Error& e) {
        return report_error(to_string(e.code()), e.what(), exit_code(e.code()));
    } catch (const json::exception& e) {
        return report_error("BadSpec", e.what(), 2);
    } catch (const fs::filesystem_error& e) {
        return report_error("IoError", e.what(), 2);
    } catch (const std::exception& e) {
        return report_error("InternalError", e.what(), 3);
    }
    return 2;
}
