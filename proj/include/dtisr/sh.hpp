#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <vector>

#include "dtisr/core.hpp"

namespace dtisr {

// Real, even, second-order spherical harmonic coefficients in the fixed
// channel order [Y00, Y2^-2, Y2^-1, Y2^0, Y2^1, Y2^2]. The exact basis
// formulas (orthonormal over the sphere, Cartesian form on unit directions):
//   Y00    = 1/(2 sqrt(pi))
//   Y2^-2  = sqrt(15/(4 pi)) * x * y
//   Y2^-1  = sqrt(15/(4 pi)) * y * z
//   Y2^0   = sqrt(5/(16 pi)) * (3 z^2 - 1)
//   Y2^1   = sqrt(15/(4 pi)) * x * z
//   Y2^2   = sqrt(15/(16 pi)) * (x^2 - y^2)
using ShCoeffs = std::array<double, 6>;

inline constexpr double kY00 = 0.28209479177387814;  // 1/(2 sqrt(pi))

inline std::array<double, 6> eval_real_sh_basis(const Vec3& direction) {
    const double n = norm(direction);
    if (std::abs(n - 1.0) > 1e-9) throw ArgumentError("eval_real_sh_basis: direction must be unit");
    const double x = direction[0], y = direction[1], z = direction[2];
    const double c1 = std::sqrt(15.0 / (4.0 * kPi));
    const double c2 = std::sqrt(5.0 / (16.0 * kPi));
    const double c3 = std::sqrt(15.0 / (16.0 * kPi));
    return {kY00, c1 * x * y, c1 * y * z, c2 * (3.0 * z * z - 1.0), c1 * x * z, c3 * (x * x - y * y)};
}

inline double eval_sh(const ShCoeffs& coeffs, const Vec3& direction) {
    const auto basis = eval_real_sh_basis(direction);
    double s = 0;
    for (int i = 0; i < 6; ++i) s += coeffs[std::size_t(i)] * basis[std::size_t(i)];
    return s;
}

// Rotation-invariant power per degree: p0 = c0^2, p2 = sum of l=2 squares.
inline std::array<double, 2> sh_power(const ShCoeffs& c) {
    double p2 = 0;
    for (int i = 1; i < 6; ++i) p2 += c[std::size_t(i)] * c[std::size_t(i)];
    return {c[0] * c[0], p2};
}

// Least-squares fit of even l<=2 coefficients from sampled values.
inline ShCoeffs fit_sh(const std::vector<double>& signals, const std::vector<Vec3>& directions) {
    if (signals.size() != directions.size()) throw ArgumentError("fit_sh: size mismatch");
    if (signals.size() < 6) throw GeometryError("fit_sh: needs at least six directions");
    MatX basis(int(signals.size()), 6);
    for (int r = 0; r < basis.rows(); ++r) {
        const auto row = eval_real_sh_basis(directions[std::size_t(r)]);
        for (int c = 0; c < 6; ++c) basis(r, c) = row[std::size_t(c)];
    }
    if (matrix_rank(basis) < 6) throw GeometryError("fit_sh: directions do not span the l<=2 basis");
    const auto coeffs = lstsq(basis, signals);
    ShCoeffs out{};
    std::copy(coeffs.begin(), coeffs.end(), out.begin());
    return out;
}

// Shared fit operator for repeated per-voxel fits on a fixed direction set.
struct ShFitOperator {
    MatX basis;     // N x 6
    MatX solve_op;  // 6 x N

    explicit ShFitOperator(const std::vector<Vec3>& directions) {
        basis = MatX(int(directions.size()), 6);
        for (int r = 0; r < basis.rows(); ++r) {
            const auto row = eval_real_sh_basis(directions[std::size_t(r)]);
            for (int c = 0; c < 6; ++c) basis(r, c) = row[std::size_t(c)];
        }
        if (matrix_rank(basis) < 6) throw GeometryError("fit_sh: directions do not span the l<=2 basis");
        const MatX bt = basis.transposed();
        solve_op = solve_dense_multi(bt * basis, bt);
    }

    ShCoeffs fit(const std::vector<double>& signals) const {
        ShCoeffs c{};
        for (int r = 0; r < 6; ++r) {
            double s = 0;
            for (int k = 0; k < solve_op.cols(); ++k) s += solve_op(r, k) * signals[std::size_t(k)];
            c[std::size_t(r)] = s;
        }
        return c;
    }
};

namespace wigner_detail {

inline double factorial(int n) {
    double f = 1.0;
    for (int i = 2; i <= n; ++i) f *= double(i);
    return f;
}

// Reduced Wigner matrix element d^l_{mp,m}(beta) from the closed-form
// polynomial in cos(beta/2), sin(beta/2).
inline double small_d(int l, int mp, int m, double beta) {
    const double c = std::cos(0.5 * beta);
    const double s = std::sin(0.5 * beta);
    const double pref = std::sqrt(factorial(l + mp) * factorial(l - mp) * factorial(l + m) * factorial(l - m));
    double sum = 0.0;
    const int kmin = std::max(0, m - mp);
    const int kmax = std::min(l + m, l - mp);
    for (int k = kmin; k <= kmax; ++k) {
        const double denom = factorial(l + m - k) * factorial(k) * factorial(l - mp - k) * factorial(mp - m + k);
        const double sign = ((mp - m + k) % 2 == 0) ? 1.0 : -1.0;
        sum += sign / denom * std::pow(c, 2 * l + m - mp - 2 * k) * std::pow(s, mp - m + 2 * k);
    }
    return pref * sum;
}

// Unitary change of basis from complex to real l=2 harmonics:
// Yreal_m = sum_mc B[m][mc] * Ycomplex_mc, rows/cols ordered m = -2..2.
inline std::array<std::array<std::complex<double>, 5>, 5> real_from_complex_basis() {
    using cd = std::complex<double>;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const cd i(0.0, 1.0);
    std::array<std::array<cd, 5>, 5> b{};
    // indices: 0:-2 1:-1 2:0 3:1 4:2
    b[0][0] = i * inv_sqrt2;        // Y(-2) = i/sqrt2 (Yc(-2) - Yc(2))
    b[0][4] = -i * inv_sqrt2;
    b[1][1] = i * inv_sqrt2;        // Y(-1) = i/sqrt2 (Yc(-1) + Yc(1))
    b[1][3] = i * inv_sqrt2;
    b[2][2] = 1.0;                  // Y(0) = Yc(0)
    b[3][1] = inv_sqrt2;            // Y(1) = 1/sqrt2 (Yc(-1) - Yc(1))
    b[3][3] = -inv_sqrt2;
    b[4][0] = inv_sqrt2;            // Y(2) = 1/sqrt2 (Yc(-2) + Yc(2))
    b[4][4] = inv_sqrt2;
    return b;
}

}  // namespace wigner_detail

// Block-diagonal rotation operator on real even l<=2 coefficients: the l=0
// block is the scalar 1; the l=2 block is the real 5x5 matrix obtained by
// conjugating the complex Wigner D-block with the real<->complex basis
// change. Rotating coefficients with the operator built from R satisfies
// S'(R r) = S(r) for the represented function.
struct WignerRotation {
    double alpha = 0, beta = 0, gamma = 0;  // ZYZ angles, R = Rz(gamma) Ry(beta) Rz(alpha)
    std::array<std::array<double, 5>, 5> block2{};

    static WignerRotation from_euler_zyz(double alpha, double beta, double gamma) {
        using cd = std::complex<double>;
        WignerRotation w;
        w.alpha = alpha;
        w.beta = beta;
        w.gamma = gamma;
        // complex block: D_{mp,m} = exp(-i mp gamma) d_{mp,m}(beta) exp(-i m alpha)
        std::array<std::array<cd, 5>, 5> dc{};
        for (int mp = -2; mp <= 2; ++mp)
            for (int m = -2; m <= 2; ++m) {
                const double d = wigner_detail::small_d(2, mp, m, beta);
                const cd phase = std::exp(cd(0.0, -double(mp) * gamma)) * std::exp(cd(0.0, -double(m) * alpha));
                dc[std::size_t(mp + 2)][std::size_t(m + 2)] = phase * d;
            }
        // real block: Dr = conj(B) Dc B^T
        const auto b = wigner_detail::real_from_complex_basis();
        std::array<std::array<cd, 5>, 5> tmp{};
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 5; ++c) {
                cd s = 0.0;
                for (int k = 0; k < 5; ++k)
                    s += dc[std::size_t(r)][std::size_t(k)] * b[std::size_t(c)][std::size_t(k)];
                tmp[std::size_t(r)][std::size_t(c)] = s;
            }
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 5; ++c) {
                cd s = 0.0;
                for (int k = 0; k < 5; ++k)
                    s += std::conj(b[std::size_t(r)][std::size_t(k)]) * tmp[std::size_t(k)][std::size_t(c)];
                if (std::abs(s.imag()) > 1e-10)
                    throw NumericalError("WignerRotation: non-real rotation block");
                w.block2[std::size_t(r)][std::size_t(c)] = s.real();
            }
        return w;
    }

    // Extracts ZYZ angles from an SO(3) matrix and builds the operator.
    static WignerRotation from_matrix(const Mat3& r) {
        const double cb = std::clamp(r[2][2], -1.0, 1.0);
        const double beta = std::acos(cb);
        double alpha = 0, gamma = 0;
        const double sb = std::sin(beta);
        if (std::abs(sb) > 1e-12) {
            gamma = std::atan2(r[1][2], r[0][2]);
            alpha = std::atan2(r[2][1], -r[2][0]);
        } else if (cb > 0) {
            alpha = 0;
            gamma = std::atan2(r[1][0], r[0][0]);
        } else {
            alpha = 0;
            gamma = std::atan2(-r[0][1], -r[0][0]);
        }
        return from_euler_zyz(alpha, beta, gamma);
    }

    Mat3 matrix() const { return rotation_zyz(alpha, beta, gamma); }

    WignerRotation inverse() const { return from_euler_zyz(-gamma, -beta, -alpha); }
};

inline ShCoeffs wigner_rotate(const ShCoeffs& coeffs, const WignerRotation& rotation) {
    ShCoeffs out{};
    out[0] = coeffs[0];
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += rotation.block2[std::size_t(r)][std::size_t(c)] * coeffs[std::size_t(c + 1)];
        out[std::size_t(r + 1)] = s;
    }
    return out;
}

// Evenly distributed unit directions via the Fibonacci (golden-angle)
// spiral.
inline std::vector<Vec3> fibonacci_sphere(int count) {
    if (count < 1) throw ArgumentError("fibonacci_sphere: count must be >= 1");
    std::vector<Vec3> dirs(static_cast<std::size_t>(count));
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < count; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / double(count);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * double(i);
        dirs[std::size_t(i)] = {r * std::cos(phi), r * std::sin(phi), z};
    }
    return dirs;
}

// Rank-2 mixing perturbation c' = (I + V Q) c with V 6x2 and Q 2x6.
inline ShCoeffs low_rank_mix(const ShCoeffs& coeffs, const MatX& v, const MatX& q) {
    if (v.rows() != 6 || v.cols() != 2 || q.rows() != 2 || q.cols() != 6)
        throw ArgumentError("low_rank_mix: V must be 6x2 and Q 2x6");
    std::array<double, 2> qc{};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 6; ++c) qc[std::size_t(r)] += q(r, c) * coeffs[std::size_t(c)];
    ShCoeffs out = coeffs;
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 2; ++c) out[std::size_t(r)] += v(r, c) * qc[std::size_t(c)];
    return out;
}

}  // namespace dtisr
