#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/gradients.hpp"
#include "dtisr/icosphere.hpp"
#include "dtisr/sh.hpp"
#include "dtisr/shsample.hpp"
#include "dtisr/volume.hpp"

#include "json.hpp"

namespace dtisr {

// Train-time degradation and augmentation parameters. Defaults follow the
// ULF-targeted protocol; every operation is deterministic given (input,
// config, generator state).
struct AugmentConfig {
    std::array<int, 3> crop_size{64, 64, 64};
    double gamma_std = 0.1;
    double bias_sigma = 0.2;
    double bias_grid_mm = 4.0;
    double noise_sigma_max = 0.06;
    std::array<double, 2> resample_range_mm{1.5, 4.0};
    std::array<double, 2> drift_gain_range{0.95, 1.05};
    std::array<double, 2> mix_range{-0.025, 0.025};
    double icosphere_noise_sigma = 0.02;
    std::array<int, 2> subsample_rows{4, 9};
    int taper_length_voxels = 8;
    // calibrated so sparse-subset recovery shrinks l=2 power toward zero for
    // l=0-dominant signals instead of leaking low-order energy into it
    double ridge_lambda = 0.5;
    int deform_control_spacing = 8;
    double deform_magnitude_vox = 2.0;
    double fold_tolerance = 0.005;
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
    j = nlohmann::json{{"crop_size", c.crop_size},
                       {"gamma_std", c.gamma_std},
                       {"bias_sigma", c.bias_sigma},
                       {"bias_grid_mm", c.bias_grid_mm},
                       {"noise_sigma_max", c.noise_sigma_max},
                       {"resample_range_mm", c.resample_range_mm},
                       {"drift_gain_range", c.drift_gain_range},
                       {"mix_range", c.mix_range},
                       {"icosphere_noise_sigma", c.icosphere_noise_sigma},
                       {"subsample_rows", c.subsample_rows},
                       {"taper_length_voxels", c.taper_length_voxels},
                       {"ridge_lambda", c.ridge_lambda},
                       {"deform_control_spacing", c.deform_control_spacing},
                       {"deform_magnitude_vox", c.deform_magnitude_vox},
                       {"fold_tolerance", c.fold_tolerance},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
    AugmentConfig d;
    c.crop_size = j.value("crop_size", d.crop_size);
    c.gamma_std = j.value("gamma_std", d.gamma_std);
    c.bias_sigma = j.value("bias_sigma", d.bias_sigma);
    c.bias_grid_mm = j.value("bias_grid_mm", d.bias_grid_mm);
    c.noise_sigma_max = j.value("noise_sigma_max", d.noise_sigma_max);
    c.resample_range_mm = j.value("resample_range_mm", d.resample_range_mm);
    c.drift_gain_range = j.value("drift_gain_range", d.drift_gain_range);
    c.mix_range = j.value("mix_range", d.mix_range);
    c.icosphere_noise_sigma = j.value("icosphere_noise_sigma", d.icosphere_noise_sigma);
    c.subsample_rows = j.value("subsample_rows", d.subsample_rows);
    c.taper_length_voxels = j.value("taper_length_voxels", d.taper_length_voxels);
    c.ridge_lambda = j.value("ridge_lambda", d.ridge_lambda);
    c.deform_control_spacing = j.value("deform_control_spacing", d.deform_control_spacing);
    c.deform_magnitude_vox = j.value("deform_magnitude_vox", d.deform_magnitude_vox);
    c.fold_tolerance = j.value("fold_tolerance", d.fold_tolerance);
    c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Smooth random fields: values drawn i.i.d. on a coarse node lattice, then
// trilinearly upsampled to the voxel grid.
// ---------------------------------------------------------------------------

inline Volume random_smooth_field(const VolumeGrid& grid, double node_spacing_vox, double sigma, Rng& rng) {
    const double spacing = std::max(1.0, node_spacing_vox);
    std::array<int, 3> nodes{};
    for (int a = 0; a < 3; ++a)
        nodes[std::size_t(a)] = std::max(2, int(std::ceil(grid.dims[std::size_t(a)] / spacing)) + 1);
    std::vector<double> values(std::size_t(nodes[0]) * std::size_t(nodes[1]) * std::size_t(nodes[2]));
    for (auto& v : values) v = rng.normal(0.0, sigma);
    auto node_at = [&](int x, int y, int z) {
        return values[std::size_t(x) + std::size_t(nodes[0]) * (std::size_t(y) + std::size_t(nodes[1]) * std::size_t(z))];
    };
    Volume out(grid, 1);
    for (int z = 0; z < grid.dims[2]; ++z)
        for (int y = 0; y < grid.dims[1]; ++y)
            for (int x = 0; x < grid.dims[0]; ++x) {
                const double fx = std::min(double(x) / spacing, double(nodes[0] - 1) - 1e-9);
                const double fy = std::min(double(y) / spacing, double(nodes[1] - 1) - 1e-9);
                const double fz = std::min(double(z) / spacing, double(nodes[2] - 1) - 1e-9);
                const int x0 = int(fx), y0 = int(fy), z0 = int(fz);
                const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
                double acc = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
                            acc += w * node_at(std::min(x0 + dx, nodes[0] - 1), std::min(y0 + dy, nodes[1] - 1),
                                               std::min(z0 + dz, nodes[2] - 1));
                        }
                out.at(x, y, z) = acc;
            }
    return out;
}

// ---------------------------------------------------------------------------
// geometric_degrade: crop -> gamma (low-b, l=0) -> multiplicative bias (same
// channels) -> Gaussian noise (all channels) -> anti-aliased resample to a
// drawn coarse resolution -> trilinear upsample back to the crop grid.
// ---------------------------------------------------------------------------

inline ShSample crop_sample(const ShSample& sample, std::array<int, 3> offset, std::array<int, 3> size) {
    const auto& d = sample.grid().dims;
    for (int a = 0; a < 3; ++a)
        if (offset[std::size_t(a)] < 0 || offset[std::size_t(a)] + size[std::size_t(a)] > d[std::size_t(a)])
            throw ArgumentError("crop_sample: crop exceeds volume");
    VolumeGrid g = sample.grid();
    g.dims = size;
    // shift the affine origin to the crop corner
    for (int r = 0; r < 3; ++r)
        g.affine[std::size_t(r)][3] += g.affine[std::size_t(r)][0] * offset[0] + g.affine[std::size_t(r)][1] * offset[1] +
                                       g.affine[std::size_t(r)][2] * offset[2];
    ShSample out(g);
    for (int c = 0; c < ShSample::kChannels; ++c)
        for (int z = 0; z < size[2]; ++z)
            for (int y = 0; y < size[1]; ++y)
                for (int x = 0; x < size[0]; ++x)
                    out.field.at(x, y, z, c) = sample.field.at(x + offset[0], y + offset[1], z + offset[2], c);
    return out;
}

namespace degrade_detail {

// Gamma transform on a min-max normalized channel; flat channels pass through.
inline void apply_gamma_channel(Volume& field, int channel, const Volume& exponent) {
    const std::size_t n = field.grid.voxel_count();
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = field.data[std::size_t(channel) * n + i];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) return;
    for (std::size_t i = 0; i < n; ++i) {
        double& v = field.data[std::size_t(channel) * n + i];
        const double t = (v - lo) / (hi - lo);
        v = lo + (hi - lo) * std::pow(t, exponent.data[i]);
    }
}

}  // namespace degrade_detail

inline ShSample geometric_degrade(const ShSample& sample, const AugmentConfig& config, Rng& rng) {
    const auto& d = sample.grid().dims;
    for (int a = 0; a < 3; ++a)
        if (config.crop_size[std::size_t(a)] > d[std::size_t(a)])
            throw ArgumentError("geometric_degrade: crop larger than volume");
    std::array<int, 3> offset{};
    for (int a = 0; a < 3; ++a)
        offset[std::size_t(a)] = int(rng.uniform_int(0, d[std::size_t(a)] - config.crop_size[std::size_t(a)]));
    ShSample out = crop_sample(sample, offset, config.crop_size);
    const std::size_t n = out.voxel_count();

    // smooth gamma exponent field, mean 1 with the configured spread
    const double src_mm = out.grid().voxel_size[0];
    const double coarse_vox = std::max(2.0, config.bias_grid_mm / src_mm);
    Volume gamma_field = random_smooth_field(out.grid(), coarse_vox, config.gamma_std, rng);
    for (auto& v : gamma_field.data) v = std::exp(v);
    degrade_detail::apply_gamma_channel(out.field, 0, gamma_field);
    degrade_detail::apply_gamma_channel(out.field, 1, gamma_field);

    // smooth multiplicative bias on the same channels
    const Volume log_bias = random_smooth_field(out.grid(), coarse_vox, config.bias_sigma, rng);
    for (int c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < n; ++i) out.field.data[std::size_t(c) * n + i] *= std::exp(log_bias.data[i]);

    // additive Gaussian noise, all channels
    const double sigma = rng.uniform(0.0, config.noise_sigma_max);
    for (auto& v : out.field.data) v += rng.normal(0.0, sigma);
    for (std::size_t i = 0; i < n; ++i) out.field.data[i] = std::max(0.0, out.field.data[i]);

    // resolution degradation, then return to the crop grid
    const double target_mm = rng.uniform(config.resample_range_mm[0], config.resample_range_mm[1]);
    if (target_mm > src_mm * (1.0 + 1e-9)) {
        const Volume low = degrade_resolution(out.field, {target_mm, target_mm, target_mm});
        out.field = resample_trilinear(low, out.grid());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch deformation with local SH reorientation (polar decomposition of the
// deformation gradient) and a cosine taper enforcing zero displacement on the
// patch boundary.
// ---------------------------------------------------------------------------

struct DisplacementField {
    std::array<int, 3> origin{};  // patch corner in the sample grid
    std::array<int, 3> size{};
    std::vector<Vec3> u;  // per patch voxel

    std::size_t index(int x, int y, int z) const {
        return std::size_t(x) + std::size_t(size[0]) * (std::size_t(y) + std::size_t(size[1]) * std::size_t(z));
    }
};

namespace degrade_detail {

inline double catmull_rom(double p0, double p1, double p2, double p3, double t) {
    return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t +
                  (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t);
}

}  // namespace degrade_detail

// Control-grid displacements cubic-upsampled over the patch.
inline DisplacementField random_displacement_field(std::array<int, 3> origin, std::array<int, 3> size,
                                                   int control_spacing, double magnitude, Rng& rng) {
    DisplacementField f;
    f.origin = origin;
    f.size = size;
    const int spacing = std::max(2, control_spacing);
    std::array<int, 3> nodes{};
    for (int a = 0; a < 3; ++a) nodes[std::size_t(a)] = std::max(2, size[std::size_t(a)] / spacing + 2);
    std::vector<Vec3> control(std::size_t(nodes[0]) * std::size_t(nodes[1]) * std::size_t(nodes[2]));
    for (auto& v : control)
        v = {rng.normal(0.0, magnitude), rng.normal(0.0, magnitude), rng.normal(0.0, magnitude)};
    auto ctrl = [&](int x, int y, int z) -> const Vec3& {
        x = std::clamp(x, 0, nodes[0] - 1);
        y = std::clamp(y, 0, nodes[1] - 1);
        z = std::clamp(z, 0, nodes[2] - 1);
        return control[std::size_t(x) + std::size_t(nodes[0]) * (std::size_t(y) + std::size_t(nodes[1]) * std::size_t(z))];
    };
    f.u.resize(std::size_t(size[0]) * std::size_t(size[1]) * std::size_t(size[2]));
    for (int z = 0; z < size[2]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[0]; ++x) {
                const double fx = double(x) / spacing, fy = double(y) / spacing, fz = double(z) / spacing;
                const int ix = int(fx), iy = int(fy), iz = int(fz);
                const double tx = fx - ix, ty = fy - iy, tz = fz - iz;
                Vec3 out{};
                for (int comp = 0; comp < 3; ++comp) {
                    double zs[4];
                    for (int kz = -1; kz <= 2; ++kz) {
                        double ys[4];
                        for (int ky = -1; ky <= 2; ++ky) {
                            double xs[4];
                            for (int kx = -1; kx <= 2; ++kx)
                                xs[kx + 1] = ctrl(ix + kx, iy + ky, iz + kz)[std::size_t(comp)];
                            ys[ky + 1] = degrade_detail::catmull_rom(xs[0], xs[1], xs[2], xs[3], tx);
                        }
                        zs[kz + 1] = degrade_detail::catmull_rom(ys[0], ys[1], ys[2], ys[3], ty);
                    }
                    out[std::size_t(comp)] = degrade_detail::catmull_rom(zs[0], zs[1], zs[2], zs[3], tz);
                }
                f.u[f.index(x, y, z)] = out;
            }
    return f;
}

// Cosine taper by Chebyshev distance to the patch boundary: zero exactly on
// the boundary, identity beyond the taper length.
inline void apply_cosine_taper(DisplacementField& f, int taper_length) {
    const double b = std::max(1, taper_length);
    for (int z = 0; z < f.size[2]; ++z)
        for (int y = 0; y < f.size[1]; ++y)
            for (int x = 0; x < f.size[0]; ++x) {
                const int eta = std::min({x, y, z, f.size[0] - 1 - x, f.size[1] - 1 - y, f.size[2] - 1 - z});
                if (double(eta) >= b) continue;
                const double w = 0.5 * (1.0 - std::cos(kPi * double(eta) / b));
                auto& u = f.u[f.index(x, y, z)];
                u = w * u;
            }
}

struct DeformStats {
    double folded_fraction = 0.0;
    int attempts = 0;
};

// Applies the (already tapered) displacement field to a sample: channels are
// pulled back along phi(x) = x + u(x) and the l=2 block is rotated by the
// Wigner operator of the local rotation from right polar decomposition of
// F = I + grad(u).
inline ShSample deform_with_field(const ShSample& sample, const DisplacementField& field,
                                  double fold_tolerance, DeformStats* stats = nullptr) {
    ShSample out = sample;
    const auto& size = field.size;
    const auto& origin = field.origin;
    const std::size_t n = sample.voxel_count();

    auto u_at = [&](int x, int y, int z) -> Vec3 {
        if (x < 0 || y < 0 || z < 0 || x >= size[0] || y >= size[1] || z >= size[2]) return {0, 0, 0};
        return field.u[field.index(x, y, z)];
    };

    std::vector<Mat3> rotations(field.u.size());
    std::vector<char> valid(field.u.size(), 0);
    std::size_t folded = 0;
    for (int z = 0; z < size[2]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[0]; ++x) {
                Mat3 fgrad = mat3_identity();
                for (int comp = 0; comp < 3; ++comp) {
                    const Vec3 dx = 0.5 * (u_at(x + 1, y, z) - u_at(x - 1, y, z));
                    const Vec3 dy = 0.5 * (u_at(x, y + 1, z) - u_at(x, y - 1, z));
                    const Vec3 dz = 0.5 * (u_at(x, y, z + 1) - u_at(x, y, z - 1));
                    fgrad[std::size_t(comp)][0] += dx[std::size_t(comp)];
                    fgrad[std::size_t(comp)][1] += dy[std::size_t(comp)];
                    fgrad[std::size_t(comp)][2] += dz[std::size_t(comp)];
                }
                const std::size_t pi = field.index(x, y, z);
                if (det3(fgrad) <= 0.0) {
                    ++folded;
                    continue;
                }
                // right polar decomposition R = F U^-1, U = (F'F)^(1/2)
                const Mat3 ftf = transpose(fgrad) * fgrad;
                const SymEigen3 eig = sym_eigen3(ftf);
                Mat3 uinv{};
                for (int k = 0; k < 3; ++k) {
                    const double lam = std::max(eig.values[std::size_t(k)], 1e-18);
                    const double inv_sqrt = 1.0 / std::sqrt(lam);
                    for (int p = 0; p < 3; ++p)
                        for (int q = 0; q < 3; ++q)
                            uinv[std::size_t(p)][std::size_t(q)] += inv_sqrt * eig.vectors[std::size_t(k)][std::size_t(p)] *
                                                                    eig.vectors[std::size_t(k)][std::size_t(q)];
                }
                rotations[pi] = fgrad * uinv;
                valid[pi] = 1;
            }

    const double folded_fraction = double(folded) / double(field.u.size());
    if (stats) stats->folded_fraction = folded_fraction;
    if (folded_fraction > fold_tolerance)
        throw GeometryError("deform_with_field: folding fraction above tolerance");

    // folded voxels borrow the nearest valid rotation in scan order
    for (std::size_t i = 0; i < rotations.size(); ++i) {
        if (valid[i]) continue;
        bool found = false;
        for (std::size_t off = 1; off < rotations.size() && !found; ++off) {
            if (i >= off && valid[i - off]) {
                rotations[i] = rotations[i - off];
                found = true;
            } else if (i + off < rotations.size() && valid[i + off]) {
                rotations[i] = rotations[i + off];
                found = true;
            }
        }
        if (!found) rotations[i] = mat3_identity();
    }

    for (int z = 0; z < size[2]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[0]; ++x) {
                const std::size_t pi = field.index(x, y, z);
                const Vec3& u = field.u[pi];
                const int gx = x + origin[0], gy = y + origin[1], gz = z + origin[2];
                std::array<double, ShSample::kChannels> sampled{};
                for (int c = 0; c < ShSample::kChannels; ++c)
                    sampled[std::size_t(c)] =
                        sample.field.sample_trilinear(gx + u[0], gy + u[1], gz + u[2], c);
                const WignerRotation w = WignerRotation::from_matrix(rotations[pi]);
                ShCoeffs coeffs{};
                for (int k = 0; k < 6; ++k) coeffs[std::size_t(k)] = sampled[std::size_t(k + 1)];
                const ShCoeffs rotated = wigner_rotate(coeffs, w);
                const std::size_t vi = out.field.index(gx, gy, gz, 0);
                out.field.data[vi] = std::max(0.0, sampled[0]);
                for (int k = 0; k < 6; ++k)
                    out.field.data[std::size_t(k + 1) * n + vi] = rotated[std::size_t(k)];
            }
    return out;
}

inline ShSample deform_patch(const ShSample& sample, const AugmentConfig& config, Rng& rng,
                             DeformStats* stats = nullptr) {
    const auto& d = sample.grid().dims;
    std::array<int, 3> size{}, origin{};
    for (int a = 0; a < 3; ++a) {
        size[std::size_t(a)] = std::min(d[std::size_t(a)], std::max(8, d[std::size_t(a)] / 2));
        origin[std::size_t(a)] = int(rng.uniform_int(0, d[std::size_t(a)] - size[std::size_t(a)]));
    }
    const double magnitude = rng.uniform(0.0, config.deform_magnitude_vox);
    for (int attempt = 0; attempt < 10; ++attempt) {
        DisplacementField field =
            random_displacement_field(origin, size, config.deform_control_spacing, magnitude, rng);
        apply_cosine_taper(field, config.taper_length_voxels);
        try {
            ShSample out = deform_with_field(sample, field, config.fold_tolerance, stats);
            if (stats) stats->attempts = attempt + 1;
            return out;
        } catch (const GeometryError&) {
            continue;  // redraw the field
        }
    }
    throw GeometryError("deform_patch: 10 consecutive degenerate displacement fields");
}

// ---------------------------------------------------------------------------
// SH drift: conjugated per-pair gain. Rotate by random Euler angles, scale
// the m=+-1 or m=+-2 channel pair, rotate back. The l=0 channel never moves.
// ---------------------------------------------------------------------------

inline ShSample sh_drift_with(const ShSample& sample, double alpha, double beta, double gamma,
                              double gain, bool pair_m1) {
    const WignerRotation w = WignerRotation::from_euler_zyz(alpha, beta, gamma);
    const WignerRotation winv = w.inverse();
    // block indices within the l=2 block for (m=-1, m=+1) or (m=-2, m=+2)
    const int ia = pair_m1 ? 1 : 0;
    const int ib = pair_m1 ? 3 : 4;

    ShSample out = sample;
    const std::size_t n = sample.voxel_count();
    for (std::size_t v = 0; v < n; ++v) {
        ShCoeffs c = sample.coeffs(v);
        ShCoeffs r = wigner_rotate(c, w);
        r[std::size_t(ia + 1)] *= gain;
        r[std::size_t(ib + 1)] *= gain;
        ShCoeffs back = wigner_rotate(r, winv);
        back[0] = c[0];  // l=0 untouched by construction; keep it bit-exact
        out.set_coeffs(v, back);
    }
    return out;
}

inline ShSample sh_drift(const ShSample& sample, const AugmentConfig& config, Rng& rng) {
    const double alpha = rng.uniform(0.0, 2.0 * kPi);
    const double beta = rng.uniform(0.0, kPi);
    const double gamma = rng.uniform(0.0, 2.0 * kPi);
    const double gain = rng.uniform(config.drift_gain_range[0], config.drift_gain_range[1]);
    const bool pair_m1 = rng.uniform() < 0.5;
    return sh_drift_with(sample, alpha, beta, gamma, gain, pair_m1);
}

// ---------------------------------------------------------------------------
// Angular subsampling through the icosphere: project, keep a random vertex
// subset, add amplitude noise, ridge-deproject. One subset per call; the
// low-b channel is untouched.
// ---------------------------------------------------------------------------

inline ShSample angular_subsample(const ShSample& sample, const AugmentConfig& config, Rng& rng) {
    const Icosphere& sphere = shared_icosphere();
    const int k = int(rng.uniform_int(config.subsample_rows[0], config.subsample_rows[1]));
    std::vector<int> all(Icosphere::kVertexCount);
    for (int i = 0; i < Icosphere::kVertexCount; ++i) all[std::size_t(i)] = i;
    rng.shuffle(all);
    std::vector<int> selection(all.begin(), all.begin() + k);
    std::sort(selection.begin(), selection.end());
    const RidgeDeprojector deproject(selection, sphere, config.ridge_lambda);

    ShSample out = sample;
    const std::size_t n = sample.voxel_count();
    std::vector<double> h(selection.size());
    for (std::size_t v = 0; v < n; ++v) {
        const ShCoeffs c = sample.coeffs(v);
        for (std::size_t r = 0; r < selection.size(); ++r) {
            double s = 0;
            for (int i = 0; i < 6; ++i) s += sphere.projection(i, selection[r]) * c[std::size_t(i)];
            h[r] = s + rng.normal(0.0, config.icosphere_noise_sigma);
        }
        out.set_coeffs(v, deproject.apply(h));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Greedy furthest-point direction subsetting under the axial (antipodally
// symmetric) angle metric. Deterministic: starts at index 0, ties resolved
// by lowest index.
// ---------------------------------------------------------------------------

inline double axial_angle(const Vec3& a, const Vec3& b) {
    const double d = std::min(1.0, std::abs(dot(a, b)) / (norm(a) * norm(b)));
    return std::acos(d);
}

inline std::vector<std::size_t> electrostatic_subset(const std::vector<Vec3>& directions,
                                                     std::size_t target_count, std::size_t start_index = 0) {
    if (target_count == 0) throw ArgumentError("electrostatic_subset: target_count must be > 0");
    if (target_count > directions.size())
        throw ArgumentError("electrostatic_subset: target_count exceeds direction count");
    if (target_count == directions.size()) {
        std::vector<std::size_t> all(directions.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }
    std::vector<std::size_t> chosen{start_index};
    std::vector<double> min_angle(directions.size());
    for (std::size_t i = 0; i < directions.size(); ++i)
        min_angle[i] = axial_angle(directions[i], directions[start_index]);
    while (chosen.size() < target_count) {
        std::size_t best = directions.size();
        double best_angle = -1.0;
        for (std::size_t i = 0; i < directions.size(); ++i) {
            if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
            if (min_angle[i] > best_angle + 1e-15) {
                best_angle = min_angle[i];
                best = i;
            }
        }
        chosen.push_back(best);
        for (std::size_t i = 0; i < directions.size(); ++i)
            min_angle[i] = std::min(min_angle[i], axial_angle(directions[i], directions[best]));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

// ---------------------------------------------------------------------------
// Rician noise and the ADNI-style ULF degradation protocol: trilinear
// resampling to 3.5 mm isotropic, a 9-direction electrostatic subset, and
// Rician corruption of the raw signals.
// ---------------------------------------------------------------------------

inline double rician_corrupt(double signal, double sigma, Rng& rng) {
    if (sigma <= 0.0) return signal;
    const double re = signal + rng.normal(0.0, sigma);
    const double im = rng.normal(0.0, sigma);
    return std::sqrt(re * re + im * im);
}

struct UlfProtocolSettings {
    double target_resolution_mm = 3.5;
    std::size_t target_directions = 9;
    double rician_sigma = 100.0;
};

inline DwiDataset ulf_degrade_protocol(const DwiDataset& dataset, Rng& rng,
                                       const UlfProtocolSettings& settings = {}) {
    dataset.validate();
    const auto dwi = dataset.gradients.dwi_indices();
    if (dwi.size() < settings.target_directions)
        throw ArgumentError("ulf_degrade_protocol: fewer directions than the protocol target");

    std::vector<Vec3> dirs;
    dirs.reserve(dwi.size());
    for (auto i : dwi) dirs.push_back(dataset.gradients.bvecs[i]);
    const auto subset = electrostatic_subset(dirs, settings.target_directions);

    std::vector<bool> keep(dataset.gradients.size(), false);
    for (auto i : dataset.gradients.b0_indices()) keep[i] = true;
    for (auto s : subset) keep[dwi[s]] = true;

    const double src = dataset.volume.grid.voxel_size[0];
    Volume resampled = dataset.volume;
    if (std::abs(settings.target_resolution_mm - src) > 1e-9 ||
        std::abs(dataset.volume.grid.voxel_size[1] - src) > 1e-9 ||
        std::abs(dataset.volume.grid.voxel_size[2] - src) > 1e-9) {
        const VolumeGrid target = grid_for_resolution(
            dataset.volume.grid, {settings.target_resolution_mm, settings.target_resolution_mm,
                                  settings.target_resolution_mm});
        resampled = resample_trilinear(dataset.volume, target);
    }

    DwiDataset out;
    out.volume = Volume(resampled.grid, int(std::count(keep.begin(), keep.end(), true)));
    const std::size_t n = resampled.grid.voxel_count();
    int oc = 0;
    for (std::size_t c = 0; c < keep.size(); ++c) {
        if (!keep[c]) continue;
        out.gradients.bvals.push_back(dataset.gradients.bvals[c]);
        out.gradients.bvecs.push_back(dataset.gradients.bvecs[c]);
        for (std::size_t i = 0; i < n; ++i)
            out.volume.data[std::size_t(oc) * n + i] = resampled.data[c * n + i];
        ++oc;
    }
    if (settings.rician_sigma > 0.0)
        for (auto& v : out.volume.data) v = rician_corrupt(v, settings.rician_sigma, rng);
    return out;
}

}  // namespace dtisr
