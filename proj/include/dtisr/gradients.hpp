#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/volume.hpp"

namespace dtisr {

// Diffusion gradient table: per-entry b-value (s/mm^2) and unit encoding
// direction. Zero directions are only allowed for b=0 entries.
struct GradientTable {
    std::vector<double> bvals;
    std::vector<Vec3> bvecs;

    std::size_t size() const { return bvals.size(); }

    void validate() const {
        if (bvals.size() != bvecs.size()) throw ArgumentError("GradientTable: length mismatch");
        for (std::size_t i = 0; i < bvals.size(); ++i) {
            if (bvals[i] < 0.0) throw ArgumentError("GradientTable: negative b-value");
            const double n = norm(bvecs[i]);
            if (bvals[i] > 0.0) {
                if (std::abs(n - 1.0) > 1e-6)
                    throw ArgumentError("GradientTable: non-unit bvec for b>0 entry " + std::to_string(i));
            } else if (n > 1e-6 && std::abs(n - 1.0) > 1e-6) {
                throw ArgumentError("GradientTable: b=0 bvec must be zero or unit");
            }
        }
    }

    std::vector<std::size_t> b0_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < bvals.size(); ++i)
            if (bvals[i] == 0.0) idx.push_back(i);
        return idx;
    }

    std::vector<std::size_t> dwi_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < bvals.size(); ++i)
            if (bvals[i] > 0.0) idx.push_back(i);
        return idx;
    }
};

namespace detail {

inline std::vector<double> parse_number_row(const std::string& line, const std::string& context) {
    std::vector<double> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
        std::size_t consumed = 0;
        double v = 0;
        try {
            v = std::stod(tok, &consumed);
        } catch (const std::exception&) {
            throw ParseError("non-numeric token '" + tok + "' in " + context);
        }
        if (consumed != tok.size()) throw ParseError("non-numeric token '" + tok + "' in " + context);
        out.push_back(v);
    }
    return out;
}

inline std::vector<std::vector<double>> parse_number_rows(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open gradient file: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        auto row = parse_number_row(line, path);
        if (!row.empty()) rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

// FSL-style text format: bvals is one whitespace-separated row, bvecs is
// three rows (x, y, z components). Vectors are renormalized for b>0 entries.
inline GradientTable parse_gradient_table(const std::string& bval_path, const std::string& bvec_path) {
    const auto bval_rows = detail::parse_number_rows(bval_path);
    if (bval_rows.size() != 1) throw FormatError("bvals file must contain exactly one row: " + bval_path);
    const auto bvec_rows = detail::parse_number_rows(bvec_path);
    if (bvec_rows.size() != 3) throw FormatError("bvecs file must contain exactly three rows: " + bvec_path);

    const std::size_t n = bval_rows[0].size();
    for (const auto& row : bvec_rows)
        if (row.size() != n) throw FormatError("bvals/bvecs row length mismatch: " + bvec_path);

    GradientTable t;
    t.bvals = bval_rows[0];
    t.bvecs.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 v{bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]};
        const double len = norm(v);
        if (t.bvals[i] > 0.0) {
            if (len < 1e-12)
                throw FormatError("zero bvec for b>0 entry " + std::to_string(i) + ": " + bvec_path);
            v = {v[0] / len, v[1] / len, v[2] / len};
        } else if (len > 0.0 && len < 1e-12) {
            v = {0, 0, 0};
        }
        t.bvecs[i] = v;
    }
    for (double b : t.bvals)
        if (b < 0.0) throw FormatError("negative b-value: " + bval_path);
    return t;
}

inline void write_gradient_table(const GradientTable& t, const std::string& bval_path,
                                 const std::string& bvec_path) {
    std::ofstream fb(bval_path, std::ios::trunc);
    if (!fb) throw IoError("cannot write " + bval_path);
    for (std::size_t i = 0; i < t.size(); ++i) fb << (i ? " " : "") << t.bvals[i];
    fb << "\n";
    std::ofstream fv(bvec_path, std::ios::trunc);
    if (!fv) throw IoError("cannot write " + bvec_path);
    fv.precision(17);
    for (int a = 0; a < 3; ++a) {
        for (std::size_t i = 0; i < t.size(); ++i) fv << (i ? " " : "") << t.bvecs[i][std::size_t(a)];
        fv << "\n";
    }
}

// Groups entries into b-value shells. Entries with b exactly 0 always form
// their own group; the rest cluster greedily within the tolerance and are
// keyed by the group mean. Output index lists partition 0..N-1.
inline std::map<double, std::vector<std::size_t>> split_shells(const GradientTable& t, double tolerance = 50.0) {
    if (tolerance < 0.0) throw ArgumentError("split_shells: tolerance must be >= 0");
    std::vector<std::vector<std::size_t>> groups;
    std::vector<double> representative;
    std::vector<std::size_t> zero_group;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t.bvals[i] == 0.0) {
            zero_group.push_back(i);
            continue;
        }
        bool placed = false;
        for (std::size_t g = 0; g < groups.size(); ++g) {
            if (std::abs(t.bvals[i] - representative[g]) <= tolerance) {
                groups[g].push_back(i);
                placed = true;
                break;
            }
        }
        if (!placed) {
            groups.push_back({i});
            representative.push_back(t.bvals[i]);
        }
    }
    std::map<double, std::vector<std::size_t>> out;
    if (!zero_group.empty()) out[0.0] = zero_group;
    for (const auto& g : groups) {
        double mean = 0;
        for (auto i : g) mean += t.bvals[i];
        mean /= double(g.size());
        out[mean] = g;
    }
    return out;
}

// A diffusion-weighted dataset: one volume channel per gradient entry.
struct DwiDataset {
    Volume volume;
    GradientTable gradients;

    void validate() const {
        volume.validate();
        gradients.validate();
        if (volume.channels != int(gradients.size()))
            throw ArgumentError("DwiDataset: channel count != gradient count");
        if (gradients.b0_indices().empty()) throw ArgumentError("DwiDataset: needs at least one b=0 entry");
        const auto dwi = gradients.dwi_indices();
        if (dwi.size() < 6) throw GeometryError("DwiDataset: needs at least six b>0 directions");
        // rank of the quadratic-form design over the b>0 directions
        MatX design(int(dwi.size()), 6);
        for (int r = 0; r < int(dwi.size()); ++r) {
            const Vec3& u = gradients.bvecs[dwi[std::size_t(r)]];
            design(r, 0) = u[0] * u[0];
            design(r, 1) = u[1] * u[1];
            design(r, 2) = u[2] * u[2];
            design(r, 3) = 2 * u[0] * u[1];
            design(r, 4) = 2 * u[0] * u[2];
            design(r, 5) = 2 * u[1] * u[2];
        }
        if (matrix_rank(design) < 6)
            throw GeometryError("DwiDataset: b>0 directions do not span the tensor space");
    }

    Volume mean_lowb() const {
        const auto idx = gradients.b0_indices();
        if (idx.empty()) throw ArgumentError("mean_lowb: no b=0 entries");
        Volume out(volume.grid, 1);
        for (auto c : idx) {
            const std::size_t n = volume.grid.voxel_count();
            for (std::size_t i = 0; i < n; ++i) out.data[i] += volume.data[c * n + i];
        }
        for (auto& v : out.data) v /= double(idx.size());
        return out;
    }
};

}  // namespace dtisr
