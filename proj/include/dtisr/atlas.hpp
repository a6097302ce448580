#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/nifti.hpp"
#include "dtisr/tensor.hpp"
#include "dtisr/volume.hpp"

#include "json.hpp"

namespace dtisr {

enum class Tissue : int { None = 0, WM = 1, GM = 2, CSF = 3 };
constexpr int kTissueClasses = 3;

// DSW concentration from the normalized principal eigenvalue
// (lambda1 / sum), clamped to [1/3, 1): kappa = (3 l - 1) / (1 - l).
inline double kappa_from_eigenvalues(const std::array<double, 3>& eigenvalues) {
    const double sum = eigenvalues[0] + eigenvalues[1] + eigenvalues[2];
    if (sum <= 0.0) return 0.0;
    double l1 = eigenvalues[0] / sum;
    l1 = std::clamp(l1, 1.0 / 3.0, 1.0 - 1e-6);
    return (3.0 * l1 - 1.0) / (1.0 - l1);
}

// Voxelwise Beta(alpha, beta) FA priors per tissue class, hard tissue labels,
// and the DSW direction prior (mean direction + concentration).
struct AtlasPriors {
    VolumeGrid grid;
    std::array<std::vector<double>, kTissueClasses> alpha;  // index 0=WM 1=GM 2=CSF
    std::array<std::vector<double>, kTissueClasses> beta;
    std::vector<int> labels;  // Tissue enum values
    std::vector<Vec3> v1_mu;
    std::vector<double> kappa;

    std::size_t voxel_count() const { return grid.voxel_count(); }

    void validate() const {
        grid.validate();
        const std::size_t n = voxel_count();
        for (int k = 0; k < kTissueClasses; ++k)
            if (alpha[std::size_t(k)].size() != n || beta[std::size_t(k)].size() != n)
                throw ArgumentError("AtlasPriors: channel size mismatch");
        if (labels.size() != n || v1_mu.size() != n || kappa.size() != n)
            throw ArgumentError("AtlasPriors: channel size mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            const int lab = labels[i];
            if (lab < 0 || lab > 3) throw ArgumentError("AtlasPriors: bad label value");
            if (lab != 0) {
                const int k = lab - 1;
                if (!(alpha[std::size_t(k)][i] > 0.0) || !(beta[std::size_t(k)][i] > 0.0))
                    throw ArgumentError("AtlasPriors: non-positive Beta parameters in tissue");
            }
            if (kappa[i] < 0.0) throw ArgumentError("AtlasPriors: negative kappa");
            if (kappa[i] > 0.0 && std::abs(norm(v1_mu[i]) - 1.0) > 1e-6)
                throw ArgumentError("AtlasPriors: v1_mu must be unit where kappa > 0");
        }
    }
};

struct AtlasBuildSettings {
    int neighborhood_radius = 2;       // 5x5x5 same-label pooling
    double concentration_cap = 100.0;  // cap on alpha and beta
    double mean_clip = 1e-3;
};

// Method-of-moments Beta parameters pooled over a same-label spatial
// neighborhood, plus per-voxel DSW direction/concentration from the tensor
// eigensystem. Spatial pooling stands in for population pooling when only a
// single field is available.
inline AtlasPriors build_atlas_from_tensors(const TensorField& field, const Volume& label_volume,
                                            const AtlasBuildSettings& settings = {}) {
    if (!grids_compatible(field.grid, label_volume.grid))
        throw ArgumentError("build_atlas_from_tensors: grid mismatch");
    const std::size_t n = field.grid.voxel_count();
    const auto& d = field.grid.dims;

    std::vector<double> fa(n, 0.0);
    AtlasPriors atlas;
    atlas.grid = field.grid;
    for (int k = 0; k < kTissueClasses; ++k) {
        atlas.alpha[std::size_t(k)].assign(n, 0.0);
        atlas.beta[std::size_t(k)].assign(n, 0.0);
    }
    atlas.labels.assign(n, 0);
    atlas.v1_mu.assign(n, Vec3{0, 0, 1});
    atlas.kappa.assign(n, 0.0);

    for (std::size_t i = 0; i < n; ++i) {
        atlas.labels[i] = int(label_volume.data[i]);
        if (atlas.labels[i] == 0) continue;
        const TensorMetrics m = tensor_metrics(field.tensors[i]);
        fa[i] = m.fa;
        atlas.v1_mu[i] = m.v1;
        atlas.kappa[i] = kappa_from_eigenvalues(m.eigenvalues);
    }

    const int r = settings.neighborhood_radius;
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const std::size_t i = std::size_t(x) + std::size_t(d[0]) * (std::size_t(y) + std::size_t(d[1]) * std::size_t(z));
                const int lab = atlas.labels[i];
                if (lab == 0) continue;
                double sum = 0, sum2 = 0;
                int count = 0;
                for (int dz = -r; dz <= r; ++dz)
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            const int nx = x + dx, ny = y + dy, nz = z + dz;
                            if (nx < 0 || ny < 0 || nz < 0 || nx >= d[0] || ny >= d[1] || nz >= d[2]) continue;
                            const std::size_t j = std::size_t(nx) + std::size_t(d[0]) * (std::size_t(ny) + std::size_t(d[1]) * std::size_t(nz));
                            if (atlas.labels[j] != lab) continue;
                            sum += fa[j];
                            sum2 += fa[j] * fa[j];
                            ++count;
                        }
                const double mean = std::clamp(sum / count, settings.mean_clip, 1.0 - settings.mean_clip);
                const double var = std::max(0.0, sum2 / count - (sum / count) * (sum / count));
                const double nu_cap = settings.concentration_cap / std::max(mean, 1.0 - mean);
                double nu;
                if (var < 1e-12) {
                    nu = nu_cap;
                } else {
                    nu = mean * (1.0 - mean) / var - 1.0;
                    nu = std::clamp(nu, 0.2, nu_cap);
                }
                atlas.alpha[std::size_t(lab - 1)][i] = std::max(0.01, mean * nu);
                atlas.beta[std::size_t(lab - 1)][i] = std::max(0.01, (1.0 - mean) * nu);
            }
    return atlas;
}

// Rigid-rotation reorientation hook for the direction prior.
inline void rotate_atlas_directions(AtlasPriors& atlas, const Mat3& rotation) {
    for (auto& v : atlas.v1_mu) v = canonical_sign(normalized(rotation * v));
}

// ---------------------------------------------------------------------------
// Serialization: one 11-channel NIfTI plus a JSON manifest naming channels.
// ---------------------------------------------------------------------------

inline void save_atlas(const AtlasPriors& atlas, const std::string& nifti_path,
                       const std::string& manifest_path) {
    atlas.validate();
    Volume bundle(atlas.grid, 11);
    const std::size_t n = atlas.voxel_count();
    for (int k = 0; k < kTissueClasses; ++k)
        for (std::size_t i = 0; i < n; ++i) {
            bundle.data[std::size_t(k) * n + i] = atlas.alpha[std::size_t(k)][i];
            bundle.data[std::size_t(k + 3) * n + i] = atlas.beta[std::size_t(k)][i];
        }
    for (std::size_t i = 0; i < n; ++i) {
        bundle.data[6 * n + i] = double(atlas.labels[i]);
        for (int a = 0; a < 3; ++a) bundle.data[std::size_t(7 + a) * n + i] = atlas.v1_mu[i][std::size_t(a)];
        bundle.data[10 * n + i] = atlas.kappa[i];
    }
    write_nifti(bundle, nifti_path, "atlas priors bundle");

    nlohmann::json manifest;
    manifest["format"] = "atlas-priors-v1";
    manifest["volume"] = nifti_path;
    manifest["channels"] = {"alpha_wm", "alpha_gm", "alpha_csf", "beta_wm", "beta_gm",
                            "beta_csf", "labels",   "v1mu_x",    "v1mu_y",  "v1mu_z",
                            "kappa"};
    manifest["labels"] = {{"none", 0}, {"wm", 1}, {"gm", 2}, {"csf", 3}};
    std::ofstream f(manifest_path, std::ios::trunc);
    if (!f) throw IoError("cannot write atlas manifest: " + manifest_path);
    f << manifest.dump(2) << "\n";
}

inline AtlasPriors load_atlas(const std::string& nifti_path) {
    const Volume bundle = read_nifti(nifti_path);
    if (bundle.channels != 11) throw FormatError("atlas bundle must have 11 channels: " + nifti_path);
    AtlasPriors atlas;
    atlas.grid = bundle.grid;
    const std::size_t n = bundle.grid.voxel_count();
    for (int k = 0; k < kTissueClasses; ++k) {
        atlas.alpha[std::size_t(k)].assign(bundle.data.begin() + std::ptrdiff_t(std::size_t(k) * n),
                                           bundle.data.begin() + std::ptrdiff_t(std::size_t(k + 1) * n));
        atlas.beta[std::size_t(k)].assign(bundle.data.begin() + std::ptrdiff_t(std::size_t(k + 3) * n),
                                          bundle.data.begin() + std::ptrdiff_t(std::size_t(k + 4) * n));
    }
    atlas.labels.resize(n);
    atlas.v1_mu.resize(n);
    atlas.kappa.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        atlas.labels[i] = int(std::llround(bundle.data[6 * n + i]));
        atlas.v1_mu[i] = {bundle.data[7 * n + i], bundle.data[8 * n + i], bundle.data[9 * n + i]};
        const double len = norm(atlas.v1_mu[i]);
        if (len > 1e-9) atlas.v1_mu[i] = {atlas.v1_mu[i][0] / len, atlas.v1_mu[i][1] / len, atlas.v1_mu[i][2] / len};
        else atlas.v1_mu[i] = {0, 0, 1};
        atlas.kappa[i] = std::max(0.0, bundle.data[10 * n + i]);
    }
    return atlas;
}

}  // namespace dtisr
