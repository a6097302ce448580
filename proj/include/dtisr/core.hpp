#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dtisr {

// ---------------------------------------------------------------------------
// Error hierarchy. The CLI maps these onto exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct UnsupportedError : FormatError {
    using FormatError::FormatError;
};
struct CorruptionError : FormatError {
    using FormatError::FormatError;
};
struct ParseError : FormatError {
    using FormatError::FormatError;
};
struct ArgumentError : Error {
    using Error::Error;
};
struct GeometryError : Error {
    using Error::Error;
};
struct NumericalError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Deterministic random number generation (xoshiro256++ seeded by splitmix64).
// Every stochastic operation in the library draws from an explicit Rng so
// results are reproducible bit-for-bit across platforms for a given seed.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
        has_cached_normal_ = false;
        cached_normal_ = 0.0;
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform double in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive integer range
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw ArgumentError("uniform_int: empty range");
        const auto span = std::uint64_t(hi - lo) + 1;
        return lo + std::int64_t(next_u64() % span);
    }

    double normal() {
        if (has_cached_normal_) {
            has_cached_normal_ = false;
            return cached_normal_;
        }
        // Box-Muller on (0,1] uniforms
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        cached_normal_ = r * std::sin(2.0 * kPi * u2);
        has_cached_normal_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Independent stream derived from this generator's seed lineage.
    Rng split(std::uint64_t stream) const {
        std::uint64_t s = state_[0] ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        Rng out(0);
        for (auto& w : out.state_) w = splitmix64(s);
        return out;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[std::size_t(uniform_int(0, std::int64_t(i) - 1))]);
    }

  private:
    std::array<std::uint64_t, 4> state_{};
    bool has_cached_normal_;
    double cached_normal_;
};

// ---------------------------------------------------------------------------
// Small fixed-size linear algebra
// ---------------------------------------------------------------------------

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;
using Mat4 = std::array<std::array<double, 4>, 4>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (n == 0.0) throw ArgumentError("cannot normalize zero vector");
    return {a[0] / n, a[1] / n, a[2] / n};
}

inline Mat3 mat3_identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
            c[i][j] = s;
        }
    return c;
}

inline Vec3 operator*(const Mat3& a, const Vec3& v) {
    Vec3 r{};
    for (int i = 0; i < 3; ++i) r[i] = a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2];
    return r;
}

inline Mat3 transpose(const Mat3& a) {
    Mat3 t{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) t[i][j] = a[j][i];
    return t;
}

inline double det3(const Mat3& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline Mat3 inverse3(const Mat3& m) {
    const double d = det3(m);
    if (std::abs(d) < 1e-300) throw NumericalError("singular 3x3 matrix");
    Mat3 inv{};
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
    return inv;
}

// ZYZ Euler angles -> rotation matrix R = Rz(gamma) * Ry(beta) * Rz(alpha)
inline Mat3 rotation_zyz(double alpha, double beta, double gamma) {
    auto rz = [](double t) -> Mat3 {
        const double c = std::cos(t), s = std::sin(t);
        return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
    };
    auto ry = [](double t) -> Mat3 {
        const double c = std::cos(t), s = std::sin(t);
        return {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
    };
    return rz(gamma) * (ry(beta) * rz(alpha));
}

// Symmetric 3x3 eigendecomposition via cyclic Jacobi sweeps.
// Returns eigenvalues sorted descending; eigvecs[k] is the unit eigenvector
// belonging to eigenvalues[k].
struct SymEigen3 {
    std::array<double, 3> values;
    std::array<Vec3, 3> vectors;
};

inline SymEigen3 sym_eigen3(const Mat3& a_in) {
    Mat3 a = a_in;
    Mat3 v = mat3_identity();
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::abs(a[0][1]) + std::abs(a[0][2]) + std::abs(a[1][2]);
        if (off < 1e-300) break;
        const double scale = std::abs(a[0][0]) + std::abs(a[1][1]) + std::abs(a[2][2]) + off;
        if (off <= 1e-15 * scale && sweep > 1) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                Mat3 r = mat3_identity();
                r[p][p] = c;
                r[q][q] = c;
                r[p][q] = s;
                r[q][p] = -s;
                a = transpose(r) * (a * r);
                a[q][p] = a[p][q] = 0.5 * (a[p][q] + a[q][p]);
                v = v * r;
            }
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int i, int j) { return a[i][i] > a[j][j]; });
    SymEigen3 out{};
    for (int k = 0; k < 3; ++k) {
        out.values[k] = a[order[k]][order[k]];
        out.vectors[k] = {v[0][order[k]], v[1][order[k]], v[2][order[k]]};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Small dynamic dense matrices (row-major) for least-squares plumbing.
// ---------------------------------------------------------------------------

class MatX {
  public:
    MatX() = default;
    MatX(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(std::size_t(rows) * std::size_t(cols), fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    double& operator()(int r, int c) { return data_[std::size_t(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[std::size_t(r) * cols_ + c]; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    MatX transposed() const {
        MatX t(cols_, rows_);
        for (int r = 0; r < rows_; ++r)
            for (int c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    static MatX identity(int n) {
        MatX m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

  private:
    int rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline MatX operator*(const MatX& a, const MatX& b) {
    if (a.cols() != b.rows()) throw ArgumentError("matmul: shape mismatch");
    MatX c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

inline std::vector<double> operator*(const MatX& a, const std::vector<double>& x) {
    if (a.cols() != int(x.size())) throw ArgumentError("matvec: shape mismatch");
    std::vector<double> y(std::size_t(a.rows()), 0.0);
    for (int i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (int j = 0; j < a.cols(); ++j) s += a(i, j) * x[std::size_t(j)];
        y[std::size_t(i)] = s;
    }
    return y;
}

// Gaussian elimination with partial pivoting; solves A x = b in place copies.
inline std::vector<double> solve_dense(MatX a, std::vector<double> b) {
    const int n = a.rows();
    if (a.cols() != n || int(b.size()) != n) throw ArgumentError("solve_dense: shape mismatch");
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (std::abs(a(piv, col)) < 1e-300) throw NumericalError("solve_dense: singular matrix");
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(a(piv, c), a(col, c));
            std::swap(b[std::size_t(piv)], b[std::size_t(col)]);
        }
        for (int r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            b[std::size_t(r)] -= f * b[std::size_t(col)];
        }
    }
    std::vector<double> x(std::size_t(n), 0.0);
    for (int r = n - 1; r >= 0; --r) {
        double s = b[std::size_t(r)];
        for (int c = r + 1; c < n; ++c) s -= a(r, c) * x[std::size_t(c)];
        x[std::size_t(r)] = s / a(r, r);
    }
    return x;
}

inline MatX solve_dense_multi(const MatX& a, const MatX& rhs) {
    MatX out(rhs.rows(), rhs.cols());
    for (int j = 0; j < rhs.cols(); ++j) {
        std::vector<double> b(static_cast<std::size_t>(rhs.rows()));
        for (int i = 0; i < rhs.rows(); ++i) b[std::size_t(i)] = rhs(i, j);
        auto x = solve_dense(a, b);
        for (int i = 0; i < rhs.rows(); ++i) out(i, j) = x[std::size_t(i)];
    }
    return out;
}

// Least-squares solve of min ||A x - b||^2 (+ lambda ||x||^2) via the normal
// equations; adequate for the small, well-scaled systems used here.
inline std::vector<double> lstsq(const MatX& a, const std::vector<double>& b, double lambda = 0.0) {
    const MatX at = a.transposed();
    MatX ata = at * a;
    for (int i = 0; i < ata.rows(); ++i) ata(i, i) += lambda;
    return solve_dense(ata, at * b);
}

inline int matrix_rank(MatX a, double tol = 1e-10) {
    const int n = a.rows(), m = a.cols();
    double maxabs = 0.0;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c) maxabs = std::max(maxabs, std::abs(a(r, c)));
    if (maxabs == 0.0) return 0;
    int rank = 0;
    for (int col = 0; col < m && rank < n; ++col) {
        int piv = rank;
        for (int r = rank + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (std::abs(a(piv, col)) < tol * maxabs) continue;
        if (piv != rank)
            for (int c = 0; c < m; ++c) std::swap(a(piv, c), a(rank, c));
        for (int r = rank + 1; r < n; ++r) {
            const double f = a(r, col) / a(rank, col);
            for (int c = col; c < m; ++c) a(r, c) -= f * a(rank, c);
        }
        ++rank;
    }
    return rank;
}

// ---------------------------------------------------------------------------
// Deterministic parallel utilities. Work is split into fixed-size chunks that
// do not depend on the thread count, so per-chunk results (combined in chunk
// order) are invariant to how many workers run.
// ---------------------------------------------------------------------------

inline int& global_thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) { global_thread_count() = std::max(1, n); }

inline void parallel_for(std::int64_t begin, std::int64_t end,
                         const std::function<void(std::int64_t, std::int64_t)>& body,
                         std::int64_t chunk = 4096) {
    const std::int64_t total = end - begin;
    if (total <= 0) return;
    const int threads = global_thread_count();
    if (threads <= 1 || total <= chunk) {
        body(begin, end);
        return;
    }
    std::vector<std::pair<std::int64_t, std::int64_t>> chunks;
    for (std::int64_t c = begin; c < end; c += chunk) chunks.emplace_back(c, std::min(c + chunk, end));
    std::vector<std::thread> pool;
    std::size_t next = 0;
    std::mutex* mtx = new std::mutex;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, mtx] {
            for (;;) {
                std::size_t idx;
                {
                    std::lock_guard<std::mutex> lock(*mtx);
                    if (next >= chunks.size()) return;
                    idx = next++;
                }
                body(chunks[idx].first, chunks[idx].second);
            }
        });
    for (auto& th : pool) th.join();
    delete mtx;
}

// Neumaier compensated summation, fixed order.
inline double stable_sum(const std::vector<double>& v) {
    double sum = 0.0, comp = 0.0;
    for (double x : v) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }
    return sum + comp;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw ArgumentError("mean of empty vector");
    return stable_sum(v) / double(v.size());
}

// ---------------------------------------------------------------------------
// Misc numeric helpers
// ---------------------------------------------------------------------------

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw ArgumentError("correlation: size mismatch");
    const double ma = mean_of(a), mb = mean_of(b);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0 || sbb <= 0) throw NumericalError("correlation undefined for constant input");
    return sab / std::sqrt(saa * sbb);
}

// FNV-1a 64-bit content hash, used for provenance manifests.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dtisr
