#pragma once

#include <string>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/gradients.hpp"
#include "dtisr/nifti.hpp"
#include "dtisr/sh.hpp"
#include "dtisr/volume.hpp"

namespace dtisr {

// 7-channel spatio-angular field: channel 0 is the mean low-b signal, channel
// 1 the l=0 SH coefficient, channels 2..6 the five l=2 coefficients
// (m = -2..2). This channel order is fixed everywhere, including on disk.
struct ShSample {
    static constexpr int kChannels = 7;
    static constexpr const char* kChannelOrder = "lowb,sh l0,sh l2 m-2,sh l2 m-1,sh l2 m0,sh l2 m1,sh l2 m2";

    Volume field;  // 7 channels

    ShSample() = default;
    explicit ShSample(const VolumeGrid& grid) : field(grid, kChannels) {}

    const VolumeGrid& grid() const { return field.grid; }
    std::size_t voxel_count() const { return field.grid.voxel_count(); }

    double lowb(std::size_t voxel) const { return field.data[voxel]; }
    double& lowb(std::size_t voxel) { return field.data[voxel]; }

    ShCoeffs coeffs(std::size_t voxel) const {
        const std::size_t n = voxel_count();
        ShCoeffs c{};
        for (int i = 0; i < 6; ++i) c[std::size_t(i)] = field.data[std::size_t(i + 1) * n + voxel];
        return c;
    }
    void set_coeffs(std::size_t voxel, const ShCoeffs& c) {
        const std::size_t n = voxel_count();
        for (int i = 0; i < 6; ++i) field.data[std::size_t(i + 1) * n + voxel] = c[std::size_t(i)];
    }

    void validate() const {
        field.validate();
        if (field.channels != kChannels) throw ArgumentError("ShSample: expected 7 channels");
        const std::size_t n = voxel_count();
        for (std::size_t i = 0; i < n; ++i)
            if (field.data[i] < 0.0) throw ArgumentError("ShSample: negative low-b channel");
    }

    // Mean power of the l=2 block over all voxels.
    double mean_l2_power() const {
        const std::size_t n = voxel_count();
        double acc = 0;
        for (std::size_t v = 0; v < n; ++v) {
            const auto c = coeffs(v);
            acc += sh_power(c)[1];
        }
        return acc / double(n);
    }
};

// Fits an ShSample from a DWI dataset for the requested shell: per voxel the
// low-b channel is the mean b=0 signal and the SH channels are the l<=2 fit
// of the shell's diffusion-weighted signals.
inline ShSample fit_sh_sample(const DwiDataset& dataset, const std::vector<std::size_t>& shell_indices) {
    if (shell_indices.size() < 6) throw GeometryError("fit_sh_sample: shell needs at least six directions");
    std::vector<Vec3> dirs;
    dirs.reserve(shell_indices.size());
    for (auto i : shell_indices) dirs.push_back(dataset.gradients.bvecs[i]);
    const ShFitOperator op(dirs);
    const Volume lowb = dataset.mean_lowb();
    const std::size_t n = dataset.volume.grid.voxel_count();

    ShSample out(dataset.volume.grid);
    std::vector<double> signals(shell_indices.size());
    for (std::size_t v = 0; v < n; ++v) {
        out.field.data[v] = std::max(0.0, lowb.data[v]);
        for (std::size_t k = 0; k < shell_indices.size(); ++k)
            signals[k] = dataset.volume.data[shell_indices[k] * n + v];
        out.set_coeffs(v, op.fit(signals));
    }
    return out;
}

inline ShSample fit_sh_sample(const DwiDataset& dataset, double shell_b, double tolerance = 50.0) {
    const auto shells = split_shells(dataset.gradients, tolerance);
    for (const auto& [b, idx] : shells)
        if (b > 0.0 && std::abs(b - shell_b) <= tolerance) return fit_sh_sample(dataset, idx);
    throw ArgumentError("fit_sh_sample: no shell near b=" + std::to_string(shell_b));
}

// Re-synthesizes a DWI dataset from an ShSample by evaluating the SH signal
// at the requested directions; b=0 channels carry the low-b channel.
inline DwiDataset sh_sample_to_dwi(const ShSample& sample, const GradientTable& gradients) {
    gradients.validate();
    DwiDataset out;
    out.gradients = gradients;
    out.volume = Volume(sample.grid(), int(gradients.size()));
    const std::size_t n = sample.voxel_count();
    std::vector<std::array<double, 6>> basis(gradients.size());
    for (std::size_t i = 0; i < gradients.size(); ++i)
        if (gradients.bvals[i] > 0.0) basis[i] = eval_real_sh_basis(gradients.bvecs[i]);
    for (std::size_t v = 0; v < n; ++v) {
        const auto c = sample.coeffs(v);
        for (std::size_t i = 0; i < gradients.size(); ++i) {
            if (gradients.bvals[i] == 0.0) {
                out.volume.data[i * n + v] = sample.lowb(v);
            } else {
                double s = 0;
                for (int k = 0; k < 6; ++k) s += c[std::size_t(k)] * basis[i][std::size_t(k)];
                out.volume.data[i * n + v] = std::max(0.0, s);
            }
        }
    }
    return out;
}

inline void write_sh_sample(const ShSample& sample, const std::string& path) {
    write_nifti(sample.field, path, std::string("shsample:") + ShSample::kChannelOrder);
}

inline ShSample read_sh_sample(const std::string& path) {
    ShSample s;
    s.field = read_nifti(path);
    if (s.field.channels != ShSample::kChannels)
        throw FormatError("ShSample file must have 7 channels: " + path);
    return s;
}

}  // namespace dtisr
