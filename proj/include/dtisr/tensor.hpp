#pragma once

#include <cmath>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/gradients.hpp"

namespace dtisr {

// Symmetric diffusion tensor, mm^2/s, stored as the six unique components.
struct DiffusionTensor {
    double xx = 0, yy = 0, zz = 0, xy = 0, xz = 0, yz = 0;

    Mat3 matrix() const { return {{{xx, xy, xz}, {xy, yy, yz}, {xz, yz, zz}}}; }

    static DiffusionTensor from_matrix(const Mat3& m) {
        return {m[0][0], m[1][1], m[2][2], 0.5 * (m[0][1] + m[1][0]), 0.5 * (m[0][2] + m[2][0]),
                0.5 * (m[1][2] + m[2][1])};
    }

    static DiffusionTensor diagonal(double a, double b, double c) { return {a, b, c, 0, 0, 0}; }

    double quadratic_form(const Vec3& u) const {
        return xx * u[0] * u[0] + yy * u[1] * u[1] + zz * u[2] * u[2] + 2.0 * xy * u[0] * u[1] +
               2.0 * xz * u[0] * u[2] + 2.0 * yz * u[1] * u[2];
    }
};

// Stejskal-Tanner forward signal: S = S0 * exp(-b * u' D u).
inline double st_forward(double s0, const DiffusionTensor& tensor, double bval, const Vec3& bvec) {
    return s0 * std::exp(-bval * tensor.quadratic_form(bvec));
}

struct TensorMetrics {
    double fa = 0.0;
    double adc = 0.0;           // mean diffusivity
    Vec3 v1{0, 0, 1};           // principal eigenvector, sign-canonicalized
    std::array<double, 3> eigenvalues{0, 0, 0};  // descending, clamped at 0
};

inline Vec3 canonical_sign(Vec3 v) {
    for (int i = 0; i < 3; ++i) {
        if (v[std::size_t(i)] != 0.0) {
            if (v[std::size_t(i)] < 0.0) v = {-v[0], -v[1], -v[2]};
            break;
        }
    }
    return v;
}

inline double fa_from_eigenvalues(double l1, double l2, double l3) {
    const double mean = (l1 + l2 + l3) / 3.0;
    const double num = (l1 - mean) * (l1 - mean) + (l2 - mean) * (l2 - mean) + (l3 - mean) * (l3 - mean);
    const double den = l1 * l1 + l2 * l2 + l3 * l3;
    if (den <= 0.0) return 0.0;
    return std::sqrt(std::min(1.0, 1.5 * num / den));
}

// Eigen metrics of a tensor: eigenvalues are clamped at 0 before FA/ADC.
inline TensorMetrics tensor_metrics(const DiffusionTensor& tensor) {
    const SymEigen3 eig = sym_eigen3(tensor.matrix());
    TensorMetrics m;
    for (int k = 0; k < 3; ++k) m.eigenvalues[std::size_t(k)] = std::max(0.0, eig.values[std::size_t(k)]);
    m.fa = fa_from_eigenvalues(m.eigenvalues[0], m.eigenvalues[1], m.eigenvalues[2]);
    m.adc = (m.eigenvalues[0] + m.eigenvalues[1] + m.eigenvalues[2]) / 3.0;
    m.v1 = canonical_sign(normalized(eig.vectors[0]));
    return m;
}

// Reverse-mode adjoint of the symmetric 3x3 eigendecomposition: given
// cotangents for the (descending) eigenvalues and for the principal
// eigenvector, returns dLoss/dD for the six unique tensor components
// (off-diagonal entries accumulate both symmetric positions). Degenerate
// eigenvalue gaps are regularized by gap_epsilon.
inline std::array<double, 6> sym_eigen3_adjoint(const SymEigen3& eig, const std::array<double, 3>& dlambda,
                                                const Vec3& dv1, double gap_epsilon = 1e-9) {
    Mat3 g{};
    for (int k = 0; k < 3; ++k)
        for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q)
                g[std::size_t(p)][std::size_t(q)] += dlambda[std::size_t(k)] *
                                                     eig.vectors[std::size_t(k)][std::size_t(p)] *
                                                     eig.vectors[std::size_t(k)][std::size_t(q)];
    for (int j = 1; j < 3; ++j) {
        double gap = eig.values[0] - eig.values[std::size_t(j)];
        gap += std::copysign(gap_epsilon, gap == 0.0 ? 1.0 : gap);
        const double w = dot(dv1, eig.vectors[std::size_t(j)]) / gap;
        for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q)
                g[std::size_t(p)][std::size_t(q)] +=
                    w * eig.vectors[std::size_t(j)][std::size_t(p)] * eig.vectors[0][std::size_t(q)];
    }
    return {g[0][0], g[1][1], g[2][2], g[0][1] + g[1][0], g[0][2] + g[2][0], g[1][2] + g[2][1]};
}

// Design matrix for the log-linear fit. Row layout: one row per gradient
// entry, columns (1, -b ux^2, -b uy^2, -b uz^2, -2b ux uy, -2b ux uz,
// -2b uy uz) against theta = (log S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
inline MatX tensor_design_matrix(const GradientTable& gradients) {
    const int n = int(gradients.size());
    MatX a(n, 7);
    for (int i = 0; i < n; ++i) {
        const double b = gradients.bvals[std::size_t(i)];
        const Vec3& u = gradients.bvecs[std::size_t(i)];
        a(i, 0) = 1.0;
        a(i, 1) = -b * u[0] * u[0];
        a(i, 2) = -b * u[1] * u[1];
        a(i, 3) = -b * u[2] * u[2];
        a(i, 4) = -2.0 * b * u[0] * u[1];
        a(i, 5) = -2.0 * b * u[0] * u[2];
        a(i, 6) = -2.0 * b * u[1] * u[2];
    }
    return a;
}

// Precomputed ordinary-least-squares operator theta = M * log(signals) for a
// fixed gradient table. Shared across voxels.
struct TensorFitOperator {
    MatX design;    // N x 7
    MatX solve_op;  // 7 x N, (A'A)^-1 A'

    explicit TensorFitOperator(const GradientTable& gradients) {
        design = tensor_design_matrix(gradients);
        if (matrix_rank(design) < 7)
            throw GeometryError("tensor fit: rank-deficient gradient geometry");
        const MatX at = design.transposed();
        solve_op = solve_dense_multi(at * design, at);
    }

    std::array<double, 7> fit_log(const std::vector<double>& log_signals) const {
        if (int(log_signals.size()) != design.rows())
            throw ArgumentError("tensor fit: signal count mismatch");
        std::array<double, 7> theta{};
        for (int r = 0; r < 7; ++r) {
            double s = 0;
            for (int c = 0; c < design.rows(); ++c) s += solve_op(r, c) * log_signals[std::size_t(c)];
            theta[std::size_t(r)] = s;
        }
        return theta;
    }
};

struct TensorFitResult {
    DiffusionTensor tensor;
    double log_s0 = 0.0;
};

inline TensorFitResult fit_from_theta(const std::array<double, 7>& theta) {
    TensorFitResult r;
    r.log_s0 = theta[0];
    r.tensor = {theta[1], theta[2], theta[3], theta[4], theta[5], theta[6]};
    return r;
}

// Ordinary log-linear least-squares tensor fit. Non-positive signals are
// floored at 1e-6 times the mean b=0 signal before the log transform.
inline TensorFitResult fit_tensor_loglinear(const std::vector<double>& signals,
                                            const GradientTable& gradients) {
    if (signals.size() != gradients.size()) throw ArgumentError("fit_tensor_loglinear: size mismatch");
    const auto b0 = gradients.b0_indices();
    if (b0.empty()) throw ArgumentError("fit_tensor_loglinear: needs a b=0 entry");
    double mean_b0 = 0;
    for (auto i : b0) mean_b0 += signals[i];
    mean_b0 /= double(b0.size());
    const double floor = std::max(1e-300, 1e-6 * std::max(mean_b0, 1e-30));
    std::vector<double> logs(signals.size());
    for (std::size_t i = 0; i < signals.size(); ++i) logs[i] = std::log(std::max(signals[i], floor));
    const TensorFitOperator op(gradients);
    return fit_from_theta(op.fit_log(logs));
}

inline TensorFitResult fit_tensor_loglinear(const std::vector<double>& signals,
                                            const TensorFitOperator& op,
                                            const GradientTable& gradients) {
    const auto b0 = gradients.b0_indices();
    double mean_b0 = 0;
    for (auto i : b0) mean_b0 += signals[i];
    mean_b0 /= double(b0.size());
    const double floor = std::max(1e-300, 1e-6 * std::max(mean_b0, 1e-30));
    std::vector<double> logs(signals.size());
    for (std::size_t i = 0; i < signals.size(); ++i) logs[i] = std::log(std::max(signals[i], floor));
    return fit_from_theta(op.fit_log(logs));
}

// Per-tract V1 coherence: squared norm of the sign-aligned mean direction.
// The reference direction seeds at the most central input (largest summed
// axial affinity), then one alignment pass refines it.
inline double v1_coherence(const std::vector<Vec3>& directions) {
    if (directions.empty()) throw ArgumentError("v1_coherence: empty direction list");
    const std::size_t n = directions.size();
    std::size_t seed = 0;
    if (n > 1) {
        double best = -1.0;
        for (std::size_t k = 0; k < n; ++k) {
            double affinity = 0;
            for (std::size_t j = 0; j < n; ++j) affinity += std::abs(dot(directions[k], directions[j]));
            if (affinity > best) {
                best = affinity;
                seed = k;
            }
        }
    }
    Vec3 ref = directions[seed];
    Vec3 mean{0, 0, 0};
    for (const auto& v : directions) {
        const double s = dot(v, ref) < 0.0 ? -1.0 : 1.0;
        mean = mean + s * v;
    }
    mean = (1.0 / double(n)) * mean;
    if (norm(mean) > 0.0) ref = normalized(mean);
    Vec3 aligned{0, 0, 0};
    for (const auto& v : directions) {
        const double s = dot(v, ref) < 0.0 ? -1.0 : 1.0;
        aligned = aligned + s * v;
    }
    aligned = (1.0 / double(n)) * aligned;
    return dot(aligned, aligned);
}

// Dense tensor field over a grid plus helpers to go to/from 6-channel volumes
// (channel order Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
struct TensorField {
    VolumeGrid grid;
    std::vector<DiffusionTensor> tensors;

    std::size_t size() const { return tensors.size(); }

    Volume to_volume() const {
        Volume v(grid, 6);
        const std::size_t n = grid.voxel_count();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& t = tensors[i];
            v.data[0 * n + i] = t.xx;
            v.data[1 * n + i] = t.yy;
            v.data[2 * n + i] = t.zz;
            v.data[3 * n + i] = t.xy;
            v.data[4 * n + i] = t.xz;
            v.data[5 * n + i] = t.yz;
        }
        return v;
    }

    static TensorField from_volume(const Volume& v) {
        if (v.channels != 6) throw ArgumentError("TensorField: expected 6 channels");
        TensorField f;
        f.grid = v.grid;
        const std::size_t n = v.grid.voxel_count();
        f.tensors.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            f.tensors[i] = {v.data[0 * n + i], v.data[1 * n + i], v.data[2 * n + i],
                            v.data[3 * n + i], v.data[4 * n + i], v.data[5 * n + i]};
        return f;
    }
};

// Voxel-wise tensor fit over a whole dataset; optional mask skips voxels.
struct TensorMapResult {
    TensorField tensors;
    Volume fa;
    Volume adc;
    Volume v1;  // 3 channels
    Volume log_s0;
};

inline TensorMapResult fit_tensor_map(const DwiDataset& dataset, const Volume* mask = nullptr) {
    dataset.validate();
    const TensorFitOperator op(dataset.gradients);
    const std::size_t n = dataset.volume.grid.voxel_count();
    TensorMapResult out{{dataset.volume.grid, std::vector<DiffusionTensor>(n)},
                        Volume(dataset.volume.grid, 1),
                        Volume(dataset.volume.grid, 1),
                        Volume(dataset.volume.grid, 3),
                        Volume(dataset.volume.grid, 1)};
    const int channels = dataset.volume.channels;
    std::vector<double> signals(static_cast<std::size_t>(channels));
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && mask->data[i] == 0.0) continue;
        bool all_zero = true;
        for (int c = 0; c < channels; ++c) {
            signals[std::size_t(c)] = dataset.volume.data[std::size_t(c) * n + i];
            if (signals[std::size_t(c)] > 0.0) all_zero = false;
        }
        if (all_zero) continue;
        const auto fit = fit_tensor_loglinear(signals, op, dataset.gradients);
        const auto metrics = tensor_metrics(fit.tensor);
        out.tensors.tensors[i] = fit.tensor;
        out.fa.data[i] = metrics.fa;
        out.adc.data[i] = metrics.adc;
        for (int a = 0; a < 3; ++a) out.v1.data[std::size_t(a) * n + i] = metrics.v1[std::size_t(a)];
        out.log_s0.data[i] = fit.log_s0;
    }
    return out;
}

}  // namespace dtisr
