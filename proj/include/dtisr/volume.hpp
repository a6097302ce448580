#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "dtisr/core.hpp"

namespace dtisr {

// Voxel grid geometry: dimensions, spacing and a voxel-index -> world-mm
// affine. The affine is authoritative; no implicit reorientation happens
// anywhere in the library.
struct VolumeGrid {
    std::array<int, 3> dims{1, 1, 1};
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    Mat4 affine{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}};

    std::size_t voxel_count() const {
        return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
    }

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (dims[a] < 1) throw ArgumentError("VolumeGrid: dims must be >= 1");
            if (!(voxel_size[a] > 0.0)) throw ArgumentError("VolumeGrid: voxel_size must be > 0");
        }
        Mat3 rot{};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[r][c] = affine[r][c];
        if (std::abs(det3(rot)) < 1e-12) throw ArgumentError("VolumeGrid: singular affine");
    }

    static VolumeGrid isotropic(std::array<int, 3> dims, double mm) {
        VolumeGrid g;
        g.dims = dims;
        g.voxel_size = {mm, mm, mm};
        g.affine = {{{mm, 0, 0, 0}, {0, mm, 0, 0}, {0, 0, mm, 0}, {0, 0, 0, 1}}};
        return g;
    }
};

inline bool grids_compatible(const VolumeGrid& a, const VolumeGrid& b, double tol = 1e-6) {
    if (a.dims != b.dims) return false;
    for (int i = 0; i < 3; ++i)
        if (std::abs(a.voxel_size[i] - b.voxel_size[i]) > tol) return false;
    return true;
}

// Multi-channel scalar field over a VolumeGrid. Data is stored in NIfTI
// order: x fastest, then y, z, channel.
struct Volume {
    VolumeGrid grid;
    int channels = 1;
    std::vector<double> data;

    Volume() = default;
    Volume(VolumeGrid g, int ch, double fill = 0.0)
        : grid(g), channels(ch), data(g.voxel_count() * std::size_t(ch), fill) {}

    std::size_t index(int x, int y, int z, int c = 0) const {
        return std::size_t(x) +
               std::size_t(grid.dims[0]) *
                   (std::size_t(y) + std::size_t(grid.dims[1]) *
                                         (std::size_t(z) + std::size_t(grid.dims[2]) * std::size_t(c)));
    }
    double& at(int x, int y, int z, int c = 0) { return data[index(x, y, z, c)]; }
    double at(int x, int y, int z, int c = 0) const { return data[index(x, y, z, c)]; }

    void validate() const {
        grid.validate();
        if (channels < 1) throw ArgumentError("Volume: channels must be >= 1");
        if (data.size() != grid.voxel_count() * std::size_t(channels))
            throw ArgumentError("Volume: data length mismatch");
        for (double v : data)
            if (!std::isfinite(v)) throw ArgumentError("Volume: non-finite data");
    }

    Volume channel(int c) const {
        Volume out(grid, 1);
        const std::size_t n = grid.voxel_count();
        std::copy(data.begin() + std::ptrdiff_t(n) * c, data.begin() + std::ptrdiff_t(n) * (c + 1),
                  out.data.begin());
        return out;
    }

    void set_channel(int c, const Volume& src) {
        const std::size_t n = grid.voxel_count();
        std::copy(src.data.begin(), src.data.begin() + std::ptrdiff_t(n),
                  data.begin() + std::ptrdiff_t(n) * c);
    }

    // Trilinear sample of one channel at a continuous voxel coordinate,
    // clamped to the volume bounds (edge replication).
    double sample_trilinear(double fx, double fy, double fz, int c = 0) const {
        const auto& d = grid.dims;
        fx = std::clamp(fx, 0.0, double(d[0]) - 1.0);
        fy = std::clamp(fy, 0.0, double(d[1]) - 1.0);
        fz = std::clamp(fz, 0.0, double(d[2]) - 1.0);
        const int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
        const int x1 = std::min(x0 + 1, d[0] - 1);
        const int y1 = std::min(y0 + 1, d[1] - 1);
        const int z1 = std::min(z0 + 1, d[2] - 1);
        const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
        auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
        const double c00 = lerp(at(x0, y0, z0, c), at(x1, y0, z0, c), tx);
        const double c10 = lerp(at(x0, y1, z0, c), at(x1, y1, z0, c), tx);
        const double c01 = lerp(at(x0, y0, z1, c), at(x1, y0, z1, c), tx);
        const double c11 = lerp(at(x0, y1, z1, c), at(x1, y1, z1, c), tx);
        return lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz);
    }
};

// ---------------------------------------------------------------------------
// Separable Gaussian blur (sigma per axis, in voxels). Border handling is
// kernel renormalization over the in-bounds taps, which keeps constant fields
// exactly constant.
// ---------------------------------------------------------------------------

inline std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 1e-9) return {1.0};
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(std::size_t(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[std::size_t(i + radius)] = std::exp(-0.5 * double(i) * double(i) / (sigma * sigma));
        sum += k[std::size_t(i + radius)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

inline Volume gaussian_blur(const Volume& in, std::array<double, 3> sigma_vox) {
    Volume out = in;
    const auto& d = in.grid.dims;
    for (int axis = 0; axis < 3; ++axis) {
        if (sigma_vox[std::size_t(axis)] <= 1e-9) continue;
        const auto kernel = gaussian_kernel(sigma_vox[std::size_t(axis)]);
        const int radius = int(kernel.size() / 2);
        Volume tmp = out;
        const int n = d[std::size_t(axis)];
        for (int c = 0; c < in.channels; ++c)
            for (int z = 0; z < d[2]; ++z)
                for (int y = 0; y < d[1]; ++y)
                    for (int x = 0; x < d[0]; ++x) {
                        double acc = 0.0, wsum = 0.0;
                        int idx[3] = {x, y, z};
                        const int center = idx[axis];
                        for (int t = -radius; t <= radius; ++t) {
                            const int p = center + t;
                            if (p < 0 || p >= n) continue;
                            idx[axis] = p;
                            const double w = kernel[std::size_t(t + radius)];
                            acc += w * tmp.at(idx[0], idx[1], idx[2], c);
                            wsum += w;
                        }
                        idx[axis] = center;
                        out.at(x, y, z, c) = acc / wsum;
                    }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trilinear grid resampling. Source and target cover the same physical FOV;
// coordinates map voxel centers with the half-voxel convention, so identical
// grids resample to an exact copy.
// ---------------------------------------------------------------------------

inline VolumeGrid grid_for_resolution(const VolumeGrid& src, std::array<double, 3> target_mm) {
    VolumeGrid g;
    for (int a = 0; a < 3; ++a) {
        const double fov = src.voxel_size[std::size_t(a)] * src.dims[std::size_t(a)];
        g.dims[std::size_t(a)] = std::max(1, int(std::llround(fov / target_mm[std::size_t(a)])));
        g.voxel_size[std::size_t(a)] = target_mm[std::size_t(a)];
    }
    // affine_new = affine_src * (scale + half-voxel shift)
    Mat4 t{{{0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 1}}};
    for (int a = 0; a < 3; ++a) {
        const double r = double(src.dims[std::size_t(a)]) / double(g.dims[std::size_t(a)]);
        t[std::size_t(a)][std::size_t(a)] = r;
        t[std::size_t(a)][3] = 0.5 * r - 0.5;
    }
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            double s = 0;
            for (int k = 0; k < 4; ++k) s += src.affine[std::size_t(r)][std::size_t(k)] * t[std::size_t(k)][std::size_t(c)];
            g.affine[std::size_t(r)][std::size_t(c)] = s;
        }
    return g;
}

inline Volume resample_trilinear(const Volume& in, const VolumeGrid& target) {
    Volume out(target, in.channels);
    const double rx = double(in.grid.dims[0]) / double(target.dims[0]);
    const double ry = double(in.grid.dims[1]) / double(target.dims[1]);
    const double rz = double(in.grid.dims[2]) / double(target.dims[2]);
    for (int c = 0; c < in.channels; ++c)
        for (int z = 0; z < target.dims[2]; ++z)
            for (int y = 0; y < target.dims[1]; ++y)
                for (int x = 0; x < target.dims[0]; ++x)
                    out.at(x, y, z, c) = in.sample_trilinear((x + 0.5) * rx - 0.5, (y + 0.5) * ry - 0.5,
                                                             (z + 0.5) * rz - 0.5, c);
    return out;
}

// Anti-aliased resolution change: Gaussian blur matched to the resolution
// ratio (FWHM = target * sqrt(1 - (src/target)^2)), then trilinear resampling.
inline Volume degrade_resolution(const Volume& in, std::array<double, 3> target_mm) {
    std::array<double, 3> sigma_vox{0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        const double src = in.grid.voxel_size[std::size_t(a)];
        const double tgt = target_mm[std::size_t(a)];
        if (tgt > src * (1.0 + 1e-9)) {
            const double fwhm_mm = tgt * std::sqrt(1.0 - (src / tgt) * (src / tgt));
            sigma_vox[std::size_t(a)] = fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0))) / src;
        }
    }
    const Volume blurred = gaussian_blur(in, sigma_vox);
    return resample_trilinear(blurred, grid_for_resolution(in.grid, target_mm));
}

}  // namespace dtisr
