#pragma once

#include <array>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/volume.hpp"

namespace dtisr {

// Smooth multiplicative log-bias basis: the six lowest-frequency 3-D DCT-II
// products over the grid, ordered
//   (0,0,0), (1,0,0), (0,1,0), (0,0,1), (0,1,1), (1,0,1).
// Each axis factor is cos(pi k (2i+1) / (2N)), scaled to unit RMS over the
// grid so the constant function is exactly 1 and coefficients share a scale.
// The functions are mutually orthogonal under the grid inner product.
class DctBiasBasis {
  public:
    static constexpr int kCount = 6;
    static constexpr std::array<std::array<int, 3>, kCount> kFrequencies = {
        {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 1, 1}, {1, 0, 1}}};

    explicit DctBiasBasis(const VolumeGrid& grid) : grid_(grid) {
        grid.validate();
        const std::size_t n = grid.voxel_count();
        fields_.assign(kCount, std::vector<double>(n));
        for (int f = 0; f < kCount; ++f) {
            const auto& k = kFrequencies[std::size_t(f)];
            std::array<std::vector<double>, 3> axis;
            for (int a = 0; a < 3; ++a) axis[std::size_t(a)] = axis_function(k[std::size_t(a)], grid.dims[std::size_t(a)]);
            std::size_t idx = 0;
            for (int z = 0; z < grid.dims[2]; ++z)
                for (int y = 0; y < grid.dims[1]; ++y)
                    for (int x = 0; x < grid.dims[0]; ++x, ++idx)
                        fields_[std::size_t(f)][idx] = axis[0][std::size_t(x)] * axis[1][std::size_t(y)] * axis[2][std::size_t(z)];
        }
    }

    const VolumeGrid& grid() const { return grid_; }
    const std::vector<double>& field(int f) const { return fields_[std::size_t(f)]; }
    double value(int f, std::size_t voxel) const { return fields_[std::size_t(f)][voxel]; }

    // field(x) = sum_n coeffs[n] * Phi_n(x)
    std::vector<double> evaluate(const std::array<double, kCount>& coeffs) const {
        std::vector<double> out(grid_.voxel_count(), 0.0);
        for (int f = 0; f < kCount; ++f) {
            const double c = coeffs[std::size_t(f)];
            if (c == 0.0) continue;
            const auto& phi = fields_[std::size_t(f)];
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * phi[i];
        }
        return out;
    }

    // Weighted least-squares projection of a target field onto the basis:
    // argmin sum_x w(x) (target(x) - sum_n c_n Phi_n(x))^2.
    std::array<double, kCount> project_weighted(const std::vector<double>& target,
                                                const std::vector<double>& weights) const {
        const std::size_t n = grid_.voxel_count();
        if (target.size() != n || weights.size() != n)
            throw ArgumentError("DctBiasBasis::project_weighted: size mismatch");
        MatX normal(kCount, kCount);
        std::vector<double> rhs(kCount, 0.0);
        for (int a = 0; a < kCount; ++a) {
            for (int b = a; b < kCount; ++b) {
                double s = 0;
                const auto& fa = fields_[std::size_t(a)];
                const auto& fb = fields_[std::size_t(b)];
                for (std::size_t i = 0; i < n; ++i) s += weights[i] * fa[i] * fb[i];
                normal(a, b) = normal(b, a) = s;
            }
            double r = 0;
            const auto& fa = fields_[std::size_t(a)];
            for (std::size_t i = 0; i < n; ++i) r += weights[i] * fa[i] * target[i];
            rhs[std::size_t(a)] = r;
        }
        const auto sol = solve_dense(normal, rhs);
        std::array<double, kCount> out{};
        std::copy(sol.begin(), sol.end(), out.begin());
        return out;
    }

  private:
    static std::vector<double> axis_function(int k, int n) {
        std::vector<double> v(static_cast<std::size_t>(n));
        if (k == 0) {
            std::fill(v.begin(), v.end(), 1.0);
            return v;
        }
        const double scale = std::sqrt(2.0);  // unit RMS
        for (int i = 0; i < n; ++i)
            v[std::size_t(i)] = scale * std::cos(kPi * double(k) * (2.0 * i + 1.0) / (2.0 * n));
        return v;
    }

    VolumeGrid grid_;
    std::vector<std::vector<double>> fields_;
};

// Per-direction DCT coefficient sets c[direction][n] for the direction-
// dependent log-bias expansion.
struct BiasCoefficients {
    int directions = 0;
    std::vector<std::array<double, DctBiasBasis::kCount>> c;

    explicit BiasCoefficients(int dirs = 0) : directions(dirs), c(std::size_t(dirs)) {
        for (auto& row : c) row.fill(0.0);
    }

    std::vector<double> flat() const {
        std::vector<double> out;
        out.reserve(std::size_t(directions) * DctBiasBasis::kCount);
        for (const auto& row : c)
            for (double v : row) out.push_back(v);
        return out;
    }

    static BiasCoefficients from_flat(const std::vector<double>& flat, int dirs) {
        if (flat.size() != std::size_t(dirs) * DctBiasBasis::kCount)
            throw ArgumentError("BiasCoefficients: flat size mismatch");
        BiasCoefficients out(dirs);
        for (int d = 0; d < dirs; ++d)
            for (int n = 0; n < DctBiasBasis::kCount; ++n)
                out.c[std::size_t(d)][std::size_t(n)] = flat[std::size_t(d) * DctBiasBasis::kCount + std::size_t(n)];
        return out;
    }
};

// zeta_i(x) for one direction; the multiplicative field is exp(zeta_i).
inline std::vector<double> eval_bias_field(const BiasCoefficients& coeffs, const DctBiasBasis& basis,
                                           int direction_index) {
    if (direction_index < 0 || direction_index >= coeffs.directions)
        throw ArgumentError("eval_bias_field: direction index out of range");
    return basis.evaluate(coeffs.c[std::size_t(direction_index)]);
}

}  // namespace dtisr
