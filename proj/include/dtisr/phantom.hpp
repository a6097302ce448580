#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dtisr/atlas.hpp"
#include "dtisr/core.hpp"
#include "dtisr/dct.hpp"
#include "dtisr/degrade.hpp"
#include "dtisr/gradients.hpp"
#include "dtisr/tensor.hpp"
#include "dtisr/volume.hpp"

#include "json.hpp"

namespace dtisr {

// ---------------------------------------------------------------------------
// Synthetic ground-truth generator: analytic tensor fields with tissue
// layout, forward DWI synthesis with optional injected direction-dependent
// bias, and a matching synthetic prior atlas. This is the oracle behind the
// end-to-end tests.
// ---------------------------------------------------------------------------

enum class PhantomScene { IsotropicSphere, SingleBundle, CrossingBundles, CurvedBundle };

inline std::string scene_name(PhantomScene s) {
    switch (s) {
        case PhantomScene::IsotropicSphere: return "isotropic_sphere";
        case PhantomScene::SingleBundle: return "single_bundle";
        case PhantomScene::CrossingBundles: return "crossing_bundles";
        case PhantomScene::CurvedBundle: return "curved_bundle";
    }
    throw ArgumentError("unknown scene");
}

inline PhantomScene scene_from_name(const std::string& name) {
    if (name == "isotropic_sphere") return PhantomScene::IsotropicSphere;
    if (name == "single_bundle") return PhantomScene::SingleBundle;
    if (name == "crossing_bundles") return PhantomScene::CrossingBundles;
    if (name == "curved_bundle") return PhantomScene::CurvedBundle;
    throw ArgumentError("unknown phantom scene: " + name);
}

struct PhantomSpec {
    VolumeGrid grid = VolumeGrid::isotropic({56, 64, 52}, 3.5);
    PhantomScene scene = PhantomScene::SingleBundle;
    double wm_axial = 1.7e-3;   // mm^2/s
    double wm_radial = 3.0e-4;
    double gm_diffusivity = 8.0e-4;
    // optional radial anisotropy of the cortical shell (0 = isotropic GM);
    // nonzero values mimic cortical radial anisotropy with the radial
    // direction varying over the sphere
    double gm_radial_anisotropy = 0.0;
    double csf_diffusivity = 3.0e-3;
    double s0_wm = 800.0;
    double s0_gm = 900.0;
    double s0_csf = 1000.0;
    double head_radius_frac = 0.92;   // of the min half-extent
    double gm_shell_frac = 0.18;      // shell thickness as fraction of head radius
    double bundle_radius_frac = 0.30;
    double arc_radius_frac = 0.55;    // curved-bundle centerline radius, of the head radius
    std::uint64_t seed = 0;

    void validate() const {
        grid.validate();
        if (!(wm_axial > 0) || !(wm_radial > 0) || !(gm_diffusivity > 0) || !(csf_diffusivity > 0))
            throw ArgumentError("PhantomSpec: diffusivities must be > 0");
        if (wm_axial < wm_radial) throw ArgumentError("PhantomSpec: bundle axial must be >= radial");
    }
};

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
    j = nlohmann::json{{"dims", s.grid.dims},
                       {"voxel_mm", s.grid.voxel_size[0]},
                       {"scene", scene_name(s.scene)},
                       {"wm_axial", s.wm_axial},
                       {"wm_radial", s.wm_radial},
                       {"gm_diffusivity", s.gm_diffusivity},
                       {"csf_diffusivity", s.csf_diffusivity},
                       {"s0_wm", s.s0_wm},
                       {"s0_gm", s.s0_gm},
                       {"s0_csf", s.s0_csf},
                       {"head_radius_frac", s.head_radius_frac},
                       {"gm_shell_frac", s.gm_shell_frac},
                       {"bundle_radius_frac", s.bundle_radius_frac},
                       {"arc_radius_frac", s.arc_radius_frac},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
    PhantomSpec d;
    const auto dims = j.value("dims", d.grid.dims);
    const double mm = j.value("voxel_mm", d.grid.voxel_size[0]);
    s.grid = VolumeGrid::isotropic(dims, mm);
    s.scene = scene_from_name(j.value("scene", scene_name(d.scene)));
    s.wm_axial = j.value("wm_axial", d.wm_axial);
    s.wm_radial = j.value("wm_radial", d.wm_radial);
    s.gm_diffusivity = j.value("gm_diffusivity", d.gm_diffusivity);
    s.csf_diffusivity = j.value("csf_diffusivity", d.csf_diffusivity);
    s.s0_wm = j.value("s0_wm", d.s0_wm);
    s.s0_gm = j.value("s0_gm", d.s0_gm);
    s.s0_csf = j.value("s0_csf", d.s0_csf);
    s.head_radius_frac = j.value("head_radius_frac", d.head_radius_frac);
    s.gm_shell_frac = j.value("gm_shell_frac", d.gm_shell_frac);
    s.bundle_radius_frac = j.value("bundle_radius_frac", d.bundle_radius_frac);
    s.arc_radius_frac = j.value("arc_radius_frac", d.arc_radius_frac);
    s.seed = j.value("seed", d.seed);
}

struct PhantomField {
    TensorField tensors;
    Volume labels;  // Tissue values
    Volume s0;
    Volume v1_truth;  // 3 channels, zero outside bundles
    Volume fa_truth;
};

namespace phantom_detail {

inline DiffusionTensor cylinder_tensor(const Vec3& axis, double axial, double radial) {
    const Vec3 a = normalized(axis);
    DiffusionTensor t;
    t.xx = radial + (axial - radial) * a[0] * a[0];
    t.yy = radial + (axial - radial) * a[1] * a[1];
    t.zz = radial + (axial - radial) * a[2] * a[2];
    t.xy = (axial - radial) * a[0] * a[1];
    t.xz = (axial - radial) * a[0] * a[2];
    t.yz = (axial - radial) * a[1] * a[2];
    return t;
}

// random orthonormal frame derived from the seed
inline std::array<Vec3, 3> random_frame(Rng& rng) {
    Vec3 a{rng.normal(), rng.normal(), rng.normal()};
    a = normalized(a);
    Vec3 helper{rng.normal(), rng.normal(), rng.normal()};
    Vec3 b = cross(a, helper);
    while (norm(b) < 1e-6) {
        helper = {rng.normal(), rng.normal(), rng.normal()};
        b = cross(a, helper);
    }
    b = normalized(b);
    const Vec3 c = cross(a, b);
    return {a, b, c};
}

}  // namespace phantom_detail

inline PhantomField make_tensor_field(const PhantomSpec& spec) {
    spec.validate();
    const auto& d = spec.grid.dims;
    const std::size_t n = spec.grid.voxel_count();
    PhantomField out;
    out.tensors.grid = spec.grid;
    out.tensors.tensors.assign(n, DiffusionTensor{});
    out.labels = Volume(spec.grid, 1);
    out.s0 = Volume(spec.grid, 1);
    out.v1_truth = Volume(spec.grid, 3);
    out.fa_truth = Volume(spec.grid, 1);

    Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto frame = phantom_detail::random_frame(rng);

    const Vec3 center{0.5 * (d[0] - 1) * spec.grid.voxel_size[0], 0.5 * (d[1] - 1) * spec.grid.voxel_size[1],
                      0.5 * (d[2] - 1) * spec.grid.voxel_size[2]};
    const double half_extent = std::min({center[0], center[1], center[2]});
    const double head_r = spec.head_radius_frac * half_extent;
    const double gm_inner = head_r * (1.0 - spec.gm_shell_frac);
    const double bundle_r = spec.bundle_radius_frac * head_r;
    const double arc_radius = spec.arc_radius_frac * head_r;

    std::size_t i = 0;
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x, ++i) {
                const Vec3 p{x * spec.grid.voxel_size[0] - center[0], y * spec.grid.voxel_size[1] - center[1],
                             z * spec.grid.voxel_size[2] - center[2]};
                const double r = norm(p);
                if (r > head_r) continue;  // air

                int label;
                DiffusionTensor tensor;
                Vec3 v1{0, 0, 0};
                if (spec.scene == PhantomScene::IsotropicSphere) {
                    label = int(Tissue::GM);
                    tensor = DiffusionTensor::diagonal(spec.gm_diffusivity, spec.gm_diffusivity,
                                                       spec.gm_diffusivity);
                } else if (r > gm_inner) {
                    label = int(Tissue::GM);
                    if (spec.gm_radial_anisotropy > 0.0 && r > 1e-9) {
                        const double axial = spec.gm_diffusivity * (1.0 + spec.gm_radial_anisotropy);
                        const double radial = spec.gm_diffusivity * (1.0 - 0.5 * spec.gm_radial_anisotropy);
                        tensor = phantom_detail::cylinder_tensor((1.0 / r) * p, axial, radial);
                        v1 = canonical_sign((1.0 / r) * p);
                    } else {
                        tensor = DiffusionTensor::diagonal(spec.gm_diffusivity, spec.gm_diffusivity,
                                                           spec.gm_diffusivity);
                    }
                } else {
                    label = int(Tissue::CSF);
                    tensor = DiffusionTensor::diagonal(spec.csf_diffusivity, spec.csf_diffusivity,
                                                       spec.csf_diffusivity);
                    // bundle membership
                    if (spec.scene == PhantomScene::SingleBundle ||
                        spec.scene == PhantomScene::CrossingBundles) {
                        const double d1 = std::sqrt(std::max(0.0, dot(p, p) - dot(p, frame[0]) * dot(p, frame[0])));
                        bool in1 = d1 < bundle_r;
                        bool in2 = false;
                        if (spec.scene == PhantomScene::CrossingBundles) {
                            const double d2 =
                                std::sqrt(std::max(0.0, dot(p, p) - dot(p, frame[1]) * dot(p, frame[1])));
                            in2 = d2 < bundle_r;
                        }
                        if (in1 && in2) {
                            // crossing region: two-tensor mean (single-tensor cannot represent it)
                            const auto t1 = phantom_detail::cylinder_tensor(frame[0], spec.wm_axial, spec.wm_radial);
                            const auto t2 = phantom_detail::cylinder_tensor(frame[1], spec.wm_axial, spec.wm_radial);
                            tensor = {0.5 * (t1.xx + t2.xx), 0.5 * (t1.yy + t2.yy), 0.5 * (t1.zz + t2.zz),
                                      0.5 * (t1.xy + t2.xy), 0.5 * (t1.xz + t2.xz), 0.5 * (t1.yz + t2.yz)};
                            label = int(Tissue::WM);
                        } else if (in1 || in2) {
                            const Vec3 axis = in1 ? frame[0] : frame[1];
                            tensor = phantom_detail::cylinder_tensor(axis, spec.wm_axial, spec.wm_radial);
                            v1 = canonical_sign(axis);
                            label = int(Tissue::WM);
                        }
                    } else if (spec.scene == PhantomScene::CurvedBundle) {
                        // torus around a circle of radius arc_radius in the
                        // frame[0]-frame[1] plane; tangent is analytic
                        const double pu = dot(p, frame[0]);
                        const double pv = dot(p, frame[1]);
                        const double pw = dot(p, frame[2]);
                        const double rho = std::sqrt(pu * pu + pv * pv);
                        const double ring = std::sqrt((rho - arc_radius) * (rho - arc_radius) + pw * pw);
                        if (ring < bundle_r && rho > 1e-9) {
                            const Vec3 tangent =
                                normalized((-pv / rho) * frame[0] + (pu / rho) * frame[1]);
                            tensor = phantom_detail::cylinder_tensor(tangent, spec.wm_axial, spec.wm_radial);
                            v1 = canonical_sign(tangent);
                            label = int(Tissue::WM);
                        }
                    }
                }

                out.labels.data[i] = double(label);
                out.tensors.tensors[i] = tensor;
                out.s0.data[i] = label == int(Tissue::WM)   ? spec.s0_wm
                                 : label == int(Tissue::GM) ? spec.s0_gm
                                                            : spec.s0_csf;
                const auto metrics = tensor_metrics(tensor);
                out.fa_truth.data[i] = metrics.fa;
                if (norm(v1) > 0)
                    for (int a = 0; a < 3; ++a) out.v1_truth.data[std::size_t(a) * n + i] = v1[std::size_t(a)];
            }
    return out;
}

// ---------------------------------------------------------------------------
// Injected direction-dependent bias: per-direction smooth multiplicative
// signal scaling Gamma_i(x) and b-value modulation Upsilon_i(x), both
// band-limited to the six lowest DCT modes. The per-direction log fields are
// demeaned across directions, so the injected bias is orthogonal to the
// low-b gauge that the EM step owns; a separate common-mode field can be
// injected through the low-b channel when wanted.
// ---------------------------------------------------------------------------

struct InjectedBias {
    BiasCoefficients log_gamma;    // directions x 6
    BiasCoefficients log_upsilon;  // directions x 6
};

struct InjectedBiasSettings {
    std::array<double, 2> gamma_range{0.7, 1.3};
    std::array<double, 2> upsilon_range{1.0, 1.0};
    bool zero_common_mode = true;
    // Directional structure of the injected fields. The quadratic-form
    // default mimics gradient-field errors, which perturb the effective
    // b-matrix: zeta_d proportional to u_d' C(x) u_d with C traceless
    // symmetric. Such fields stay inside the span a tensor-based objective
    // can identify; free-form injection adds components that live in the
    // fit's residual null space and are invisible to any FA/V1 prior.
    double quadratic_fraction = 1.0;
    std::vector<Vec3> directions;  // required for the quadratic structure
};

inline InjectedBias make_injected_bias(const DctBiasBasis& basis, int n_directions, Rng& rng,
                                       const InjectedBiasSettings& settings = {}) {
    InjectedBias out;
    out.log_gamma = BiasCoefficients(n_directions);
    out.log_upsilon = BiasCoefficients(n_directions);

    std::vector<Vec3> dirs = settings.directions;
    if (dirs.empty() && settings.quadratic_fraction > 0.0) {
        const auto pool = fibonacci_sphere(256);
        const auto subset = electrostatic_subset(pool, std::size_t(n_directions));
        for (auto i : subset) dirs.push_back(pool[i]);
    }

    auto fill = [&](BiasCoefficients& coeffs, std::array<double, 2> range) {
        const double max_log = std::min(std::abs(std::log(range[0])), std::abs(std::log(range[1])));
        if (max_log <= 0.0) return;
        const double qf = std::clamp(settings.quadratic_fraction, 0.0, 1.0);
        for (int f = 0; f < DctBiasBasis::kCount; ++f) {
            // traceless symmetric directional generator for this spatial mode
            Mat3 c{};
            const double dxx = rng.normal(), dyy = rng.normal();
            c[0][0] = dxx;
            c[1][1] = dyy;
            c[2][2] = -(dxx + dyy);
            c[0][1] = c[1][0] = rng.normal();
            c[0][2] = c[2][0] = rng.normal();
            c[1][2] = c[2][1] = rng.normal();
            for (int d = 0; d < n_directions; ++d) {
                double quad = 0;
                if (qf > 0.0) {
                    const Vec3& u = dirs[std::size_t(d)];
                    quad = u[0] * (c[0][0] * u[0] + c[0][1] * u[1] + c[0][2] * u[2]) +
                           u[1] * (c[1][0] * u[0] + c[1][1] * u[1] + c[1][2] * u[2]) +
                           u[2] * (c[2][0] * u[0] + c[2][1] * u[1] + c[2][2] * u[2]);
                }
                const double freeform = (f > 0 && qf < 1.0) ? rng.uniform(-1.0, 1.0) : 0.0;
                coeffs.c[std::size_t(d)][std::size_t(f)] = qf * quad + (1.0 - qf) * freeform;
            }
        }
        if (settings.zero_common_mode && n_directions > 1) {
            for (int f = 0; f < DctBiasBasis::kCount; ++f) {
                double mean = 0;
                for (int d = 0; d < n_directions; ++d) mean += coeffs.c[std::size_t(d)][std::size_t(f)];
                mean /= double(n_directions);
                for (int d = 0; d < n_directions; ++d) coeffs.c[std::size_t(d)][std::size_t(f)] -= mean;
            }
        }
        // scale jointly so the worst-case |log field| hits 95% of the bound
        double peak = 0;
        for (int d = 0; d < n_directions; ++d) {
            const auto field = basis.evaluate(coeffs.c[std::size_t(d)]);
            for (double v : field) peak = std::max(peak, std::abs(v));
        }
        if (peak > 0) {
            const double scale = 0.95 * max_log / peak;
            for (auto& row : coeffs.c)
                for (auto& v : row) v *= scale;
        }
    };
    fill(out.log_gamma, settings.gamma_range);
    fill(out.log_upsilon, settings.upsilon_range);
    return out;
}

// Collapsed ground-truth log-bias per direction (signal and b-value terms
// folded together): zeta_i(x) = log Gamma_i(x) - (Upsilon_i(x) - 1) b_i u' D u.
inline std::vector<double> ground_truth_zeta(const InjectedBias& bias, const DctBiasBasis& basis,
                                             const TensorField& tensors, double bval, const Vec3& bvec,
                                             int direction_index) {
    const auto log_gamma = basis.evaluate(bias.log_gamma.c[std::size_t(direction_index)]);
    const auto log_upsilon = basis.evaluate(bias.log_upsilon.c[std::size_t(direction_index)]);
    std::vector<double> zeta(log_gamma.size());
    for (std::size_t i = 0; i < zeta.size(); ++i) {
        const double upsilon = std::exp(log_upsilon[i]);
        zeta[i] = log_gamma[i] - (upsilon - 1.0) * bval * tensors.tensors[i].quadratic_form(bvec);
    }
    return zeta;
}

// Forward synthesis: S_i = Gamma_i S0 exp(-Upsilon_i b u'Du) (+ Rician).
// b=0 channels carry S0 directly; the direction bias applies to b>0 only.
inline DwiDataset synthesize_dwi(const TensorField& tensors, const GradientTable& gradients,
                                 const Volume& s0, const InjectedBias* bias, double rician_sigma, Rng& rng) {
    gradients.validate();
    if (!grids_compatible(tensors.grid, s0.grid)) throw ArgumentError("synthesize_dwi: grid mismatch");
    const std::size_t n = tensors.grid.voxel_count();
    DwiDataset out;
    out.gradients = gradients;
    out.volume = Volume(tensors.grid, int(gradients.size()));

    const auto dwi = gradients.dwi_indices();
    std::unique_ptr<DctBiasBasis> basis;
    if (bias) {
        if (bias->log_gamma.directions != int(dwi.size()))
            throw ArgumentError("synthesize_dwi: bias direction count mismatch");
        basis = std::make_unique<DctBiasBasis>(tensors.grid);
    }

    for (std::size_t c = 0; c < gradients.size(); ++c) {
        const double b = gradients.bvals[c];
        if (b == 0.0) {
            for (std::size_t i = 0; i < n; ++i) out.volume.data[c * n + i] = s0.data[i];
        }
    }
    for (int d = 0; d < int(dwi.size()); ++d) {
        const std::size_t c = dwi[std::size_t(d)];
        const double b = gradients.bvals[c];
        const Vec3& u = gradients.bvecs[c];
        std::vector<double> log_gamma, log_upsilon;
        if (bias) {
            log_gamma = basis->evaluate(bias->log_gamma.c[std::size_t(d)]);
            log_upsilon = basis->evaluate(bias->log_upsilon.c[std::size_t(d)]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double gamma = bias ? std::exp(log_gamma[i]) : 1.0;
            const double upsilon = bias ? std::exp(log_upsilon[i]) : 1.0;
            out.volume.data[c * n + i] =
                gamma * s0.data[i] * std::exp(-upsilon * b * tensors.tensors[i].quadratic_form(u));
        }
    }
    if (rician_sigma > 0.0)
        for (auto& v : out.volume.data) v = rician_corrupt(v, rician_sigma, rng);
    return out;
}

inline AtlasPriors make_synthetic_atlas(const TensorField& tensors, const Volume& labels) {
    return build_atlas_from_tensors(tensors, labels);
}

// The ULF sequence layout: nine b=700 directions with three b=0 volumes
// interleaved after directions 2, 5 and 8.
inline GradientTable ulf_gradient_table(double bval = 700.0) {
    const auto pool = fibonacci_sphere(256);
    const auto subset = electrostatic_subset(pool, 9);
    std::vector<Vec3> dirs;
    for (auto i : subset) dirs.push_back(canonical_sign(pool[i]));
    GradientTable t;
    int next_dir = 0;
    for (int slot = 0; slot < 12; ++slot) {
        if (slot == 2 || slot == 6 || slot == 10) {
            t.bvals.push_back(0.0);
            t.bvecs.push_back({0, 0, 0});
        } else {
            t.bvals.push_back(bval);
            t.bvecs.push_back(dirs[std::size_t(next_dir++)]);
        }
    }
    return t;
}

}  // namespace dtisr
