#pragma once

#include <algorithm>
#include <array>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/sh.hpp"

namespace dtisr {

// Level-1 subdivided icosahedron projected to the unit sphere: the 12
// original vertices followed by the 30 edge midpoints (42 vertices total),
// with K=6 nearest-neighbor adjacency and the 6x42 SH sampling matrix
// P[i][j] = basis_i(vertex_j).
struct Icosphere {
    static constexpr int kVertexCount = 42;
    static constexpr int kNeighbors = 6;

    std::vector<Vec3> vertices;                     // 42 unit vectors
    std::vector<std::array<int, 6>> knn;            // per-vertex neighbor indices
    std::vector<std::vector<int>> natural_neighbors;  // mesh edges of the subdivision
    MatX projection;                                // 6 x 42

    std::vector<double> project(const ShCoeffs& c) const {
        std::vector<double> h(std::size_t(kVertexCount), 0.0);
        for (int j = 0; j < kVertexCount; ++j) {
            double s = 0;
            for (int i = 0; i < 6; ++i) s += projection(i, j) * c[std::size_t(i)];
            h[std::size_t(j)] = s;
        }
        return h;
    }
};

inline Icosphere build_icosphere() {
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> raw = {
        {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
        {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
        {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1},
    };
    // icosahedron edges connect vertex pairs at (unnormalized) distance 2
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < 12; ++i)
        for (int j = i + 1; j < 12; ++j) {
            const Vec3 d = raw[std::size_t(i)] - raw[std::size_t(j)];
            if (std::abs(dot(d, d) - 4.0) < 1e-9) edges.emplace_back(i, j);
        }
    if (edges.size() != 30) throw NumericalError("icosahedron edge enumeration failed");

    Icosphere s;
    s.vertices.reserve(Icosphere::kVertexCount);
    for (const auto& v : raw) s.vertices.push_back(normalized(v));
    std::vector<std::vector<int>> midpoint_of(12, std::vector<int>(12, -1));
    for (const auto& [i, j] : edges) {
        const Vec3 mid = raw[std::size_t(i)] + raw[std::size_t(j)];
        midpoint_of[std::size_t(i)][std::size_t(j)] = int(s.vertices.size());
        midpoint_of[std::size_t(j)][std::size_t(i)] = int(s.vertices.size());
        s.vertices.push_back(normalized(mid));
    }

    // natural neighbors of the subdivided mesh: midpoints connect to their
    // two edge endpoints and to the midpoints of adjacent edges within the
    // two faces sharing the edge; originals connect to incident midpoints.
    s.natural_neighbors.assign(Icosphere::kVertexCount, {});
    auto add_edge = [&](int a, int b) {
        auto& na = s.natural_neighbors[std::size_t(a)];
        if (std::find(na.begin(), na.end(), b) == na.end()) na.push_back(b);
        auto& nb = s.natural_neighbors[std::size_t(b)];
        if (std::find(nb.begin(), nb.end(), a) == nb.end()) nb.push_back(a);
    };
    // faces: vertex triples that are pairwise edge-connected
    for (int i = 0; i < 12; ++i)
        for (int j = i + 1; j < 12; ++j) {
            if (midpoint_of[std::size_t(i)][std::size_t(j)] < 0) continue;
            for (int k = j + 1; k < 12; ++k) {
                if (midpoint_of[std::size_t(i)][std::size_t(k)] < 0 ||
                    midpoint_of[std::size_t(j)][std::size_t(k)] < 0)
                    continue;
                const int mij = midpoint_of[std::size_t(i)][std::size_t(j)];
                const int mik = midpoint_of[std::size_t(i)][std::size_t(k)];
                const int mjk = midpoint_of[std::size_t(j)][std::size_t(k)];
                add_edge(i, mij);
                add_edge(i, mik);
                add_edge(j, mij);
                add_edge(j, mjk);
                add_edge(k, mik);
                add_edge(k, mjk);
                add_edge(mij, mik);
                add_edge(mij, mjk);
                add_edge(mik, mjk);
            }
        }
    for (auto& nb : s.natural_neighbors) std::sort(nb.begin(), nb.end());

    // KNN(6) by Euclidean distance; ties broken by lowest vertex index.
    s.knn.resize(Icosphere::kVertexCount);
    for (int i = 0; i < Icosphere::kVertexCount; ++i) {
        std::vector<std::pair<double, int>> dist;
        for (int j = 0; j < Icosphere::kVertexCount; ++j) {
            if (j == i) continue;
            const Vec3 d = s.vertices[std::size_t(i)] - s.vertices[std::size_t(j)];
            dist.emplace_back(dot(d, d), j);
        }
        std::sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) {
            if (std::abs(a.first - b.first) > 1e-12) return a.first < b.first;
            return a.second < b.second;
        });
        for (int k = 0; k < Icosphere::kNeighbors; ++k) s.knn[std::size_t(i)][std::size_t(k)] = dist[std::size_t(k)].second;
    }

    s.projection = MatX(6, Icosphere::kVertexCount);
    for (int j = 0; j < Icosphere::kVertexCount; ++j) {
        const auto row = eval_real_sh_basis(s.vertices[std::size_t(j)]);
        for (int i = 0; i < 6; ++i) s.projection(i, j) = row[std::size_t(i)];
    }
    return s;
}

inline const Icosphere& shared_icosphere() {
    static const Icosphere s = build_icosphere();
    return s;
}

// h = P^T c: amplitude of the represented function at each vertex.
inline std::vector<double> project_to_icosphere(const ShCoeffs& coeffs, const Icosphere& sphere) {
    return sphere.project(coeffs);
}

// Ridge recovery of coefficients from a (possibly subsampled, noisy) vertex
// amplitude set: argmin ||B c - h||^2 + lambda ||c||^2 with B the selected
// rows of P^T, solved in closed form through the 6x6 normal equations.
struct RidgeDeprojector {
    MatX solve_op;  // 6 x k

    RidgeDeprojector(const std::vector<int>& selection, const Icosphere& sphere, double lambda) {
        if (selection.empty()) throw ArgumentError("deproject_ridge: empty vertex selection");
        if (lambda < 0.0) throw ArgumentError("deproject_ridge: lambda must be >= 0");
        MatX b(int(selection.size()), 6);
        for (int r = 0; r < b.rows(); ++r) {
            const int j = selection[std::size_t(r)];
            if (j < 0 || j >= Icosphere::kVertexCount) throw ArgumentError("deproject_ridge: bad vertex index");
            for (int c = 0; c < 6; ++c) b(r, c) = sphere.projection(c, j);
        }
        const MatX bt = b.transposed();
        MatX normal = bt * b;
        for (int i = 0; i < 6; ++i) normal(i, i) += lambda;
        if (lambda == 0.0 && matrix_rank(normal) < 6)
            throw NumericalError("deproject_ridge: underdetermined selection with lambda=0");
        solve_op = solve_dense_multi(normal, bt);
    }

    ShCoeffs apply(const std::vector<double>& amplitudes) const {
        if (int(amplitudes.size()) != solve_op.cols())
            throw ArgumentError("deproject_ridge: amplitude count mismatch");
        ShCoeffs c{};
        for (int r = 0; r < 6; ++r) {
            double s = 0;
            for (int k = 0; k < solve_op.cols(); ++k) s += solve_op(r, k) * amplitudes[std::size_t(k)];
            c[std::size_t(r)] = s;
        }
        return c;
    }
};

inline ShCoeffs deproject_ridge(const std::vector<double>& amplitudes, const std::vector<int>& selection,
                                const Icosphere& sphere, double lambda) {
    if (amplitudes.size() != selection.size())
        throw ArgumentError("deproject_ridge: amplitudes/selection size mismatch");
    return RidgeDeprojector(selection, sphere, lambda).apply(amplitudes);
}

// Moore-Penrose pseudo-inverse of P^T (full column rank): (P P^T)^-1 P,
// 6 x 42. deproject(project(c)) = c exactly.
inline MatX icosphere_deprojector(const Icosphere& sphere) {
    const MatX p = sphere.projection;           // 6 x 42
    const MatX ppt = p * p.transposed();        // 6 x 6
    return solve_dense_multi(ppt, p);
}

}  // namespace dtisr
