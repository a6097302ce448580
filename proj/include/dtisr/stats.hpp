#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/volume.hpp"

namespace dtisr {

// ---------------------------------------------------------------------------
// Field metrics
// ---------------------------------------------------------------------------

inline double mae(const Volume& a, const Volume& b, const Volume* mask = nullptr) {
    if (!grids_compatible(a.grid, b.grid) || a.channels != b.channels)
        throw ArgumentError("mae: field shape mismatch");
    const std::size_t n = a.grid.voxel_count();
    double total = 0;
    std::size_t count = 0;
    for (int c = 0; c < a.channels; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            if (mask && mask->data[i] == 0.0) continue;
            total += std::abs(a.data[std::size_t(c) * n + i] - b.data[std::size_t(c) * n + i]);
            ++count;
        }
    if (count == 0) throw ArgumentError("mae: empty mask");
    return total / double(count);
}

// Local normalized cross-correlation: mean over voxels of the windowed
// Pearson correlation. The window covers offsets [-(w/2-1), w/2] per axis
// (truncated at borders); zero-variance windows contribute 0.
inline double lncc(const Volume& a, const Volume& b, int window = 10) {
    if (!grids_compatible(a.grid, b.grid) || a.channels != 1 || b.channels != 1)
        throw ArgumentError("lncc: single-channel fields on a common grid required");
    if (window < 2) throw ArgumentError("lncc: window must be >= 2");
    const auto& d = a.grid.dims;
    const int lo = -(window / 2 - 1), hi = window / 2;

    // summed-area tables over a, b, a^2, b^2, ab
    const int nx = d[0] + 1, ny = d[1] + 1, nz = d[2] + 1;
    const std::size_t ntab = std::size_t(nx) * ny * nz;
    std::vector<double> sa(ntab, 0), sb(ntab, 0), saa(ntab, 0), sbb(ntab, 0), sab(ntab, 0);
    auto tab = [&](std::vector<double>& t, int x, int y, int z) -> double& {
        return t[(std::size_t(z) * ny + y) * std::size_t(nx) + x];
    };
    for (int z = 1; z < nz; ++z)
        for (int y = 1; y < ny; ++y)
            for (int x = 1; x < nx; ++x) {
                const double va = a.at(x - 1, y - 1, z - 1);
                const double vb = b.at(x - 1, y - 1, z - 1);
                auto acc = [&](std::vector<double>& t, double v) {
                    tab(t, x, y, z) = v + tab(t, x - 1, y, z) + tab(t, x, y - 1, z) + tab(t, x, y, z - 1) -
                                      tab(t, x - 1, y - 1, z) - tab(t, x - 1, y, z - 1) -
                                      tab(t, x, y - 1, z - 1) + tab(t, x - 1, y - 1, z - 1);
                };
                acc(sa, va);
                acc(sb, vb);
                acc(saa, va * va);
                acc(sbb, vb * vb);
                acc(sab, va * vb);
            }
    auto box = [&](std::vector<double>& t, int x0, int x1, int y0, int y1, int z0, int z1) {
        return tab(t, x1 + 1, y1 + 1, z1 + 1) - tab(t, x0, y1 + 1, z1 + 1) - tab(t, x1 + 1, y0, z1 + 1) -
               tab(t, x1 + 1, y1 + 1, z0) + tab(t, x0, y0, z1 + 1) + tab(t, x0, y1 + 1, z0) +
               tab(t, x1 + 1, y0, z0) - tab(t, x0, y0, z0);
    };

    double total = 0;
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const int x0 = std::max(0, x + lo), x1 = std::min(d[0] - 1, x + hi);
                const int y0 = std::max(0, y + lo), y1 = std::min(d[1] - 1, y + hi);
                const int z0 = std::max(0, z + lo), z1 = std::min(d[2] - 1, z + hi);
                const double count = double(x1 - x0 + 1) * (y1 - y0 + 1) * (z1 - z0 + 1);
                const double ma = box(sa, x0, x1, y0, y1, z0, z1) / count;
                const double mb = box(sb, x0, x1, y0, y1, z0, z1) / count;
                const double vaa = box(saa, x0, x1, y0, y1, z0, z1) / count - ma * ma;
                const double vbb = box(sbb, x0, x1, y0, y1, z0, z1) / count - mb * mb;
                const double vab = box(sab, x0, x1, y0, y1, z0, z1) / count - ma * mb;
                if (vaa > 1e-12 && vbb > 1e-12) total += vab / std::sqrt(vaa * vbb);
            }
    return total / double(a.grid.voxel_count());
}

// Axial mean angular error in degrees between two unit direction fields.
inline double angular_error_v1(const Volume& va, const Volume& vb, const Volume* mask = nullptr) {
    if (!grids_compatible(va.grid, vb.grid) || va.channels != 3 || vb.channels != 3)
        throw ArgumentError("angular_error_v1: 3-channel direction fields required");
    const std::size_t n = va.grid.voxel_count();
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && mask->data[i] == 0.0) continue;
        const Vec3 a{va.data[i], va.data[n + i], va.data[2 * n + i]};
        const Vec3 b{vb.data[i], vb.data[n + i], vb.data[2 * n + i]};
        const double na = norm(a), nb = norm(b);
        if (na < 1e-9 || nb < 1e-9) continue;
        const double c = std::min(1.0, std::abs(dot(a, b)) / (na * nb));
        total += std::acos(c) * 180.0 / kPi;
        ++count;
    }
    if (count == 0) throw ArgumentError("angular_error_v1: empty mask");
    return total / double(count);
}

// ---------------------------------------------------------------------------
// Agreement statistics
// ---------------------------------------------------------------------------

// ICC(2,1): two-way random effects, absolute agreement, single measurement.
inline double icc_2way_absolute(const MatX& measurements) {
    const int n = measurements.rows();  // subjects
    const int k = measurements.cols();  // raters
    if (n < 2 || k < 2) throw ArgumentError("icc_2way_absolute: needs >= 2 subjects and raters");
    double grand = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) grand += measurements(i, j);
    grand /= double(n) * k;
    std::vector<double> row_mean(std::size_t(n), 0), col_mean(std::size_t(k), 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
            row_mean[std::size_t(i)] += measurements(i, j) / k;
            col_mean[std::size_t(j)] += measurements(i, j) / n;
        }
    double ss_total = 0, ss_rows = 0, ss_cols = 0;
    for (int i = 0; i < n; ++i) ss_rows += (row_mean[std::size_t(i)] - grand) * (row_mean[std::size_t(i)] - grand);
    ss_rows *= k;
    for (int j = 0; j < k; ++j) ss_cols += (col_mean[std::size_t(j)] - grand) * (col_mean[std::size_t(j)] - grand);
    ss_cols *= n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) ss_total += (measurements(i, j) - grand) * (measurements(i, j) - grand);
    if (ss_total <= 0) throw NumericalError("icc_2way_absolute: zero total variance");
    const double ss_err = ss_total - ss_rows - ss_cols;
    const double ms_r = ss_rows / (n - 1);
    const double ms_c = ss_cols / (k - 1);
    const double ms_e = std::max(0.0, ss_err) / double((n - 1) * (k - 1));
    return (ms_r - ms_e) / (ms_r + (k - 1) * ms_e + (double(k) / n) * (ms_c - ms_e));
}

struct BlandAltmanResult {
    double bias = 0;
    double loa_low = 0, loa_high = 0;
    double slope = 0;  // OLS of (a-b) on (a+b)/2
    std::vector<std::pair<double, double>> points;  // (mean, diff)
};

inline BlandAltmanResult bland_altman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 3) throw ArgumentError("bland_altman: needs >= 3 paired values");
    const std::size_t n = a.size();
    BlandAltmanResult r;
    r.points.reserve(n);
    double mean_diff = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = a[i] - b[i];
        r.points.emplace_back(0.5 * (a[i] + b[i]), diff);
        mean_diff += diff;
    }
    mean_diff /= double(n);
    double var = 0;
    for (const auto& [m, diff] : r.points) var += (diff - mean_diff) * (diff - mean_diff);
    const double sd = std::sqrt(var / double(n - 1));
    r.bias = mean_diff;
    r.loa_low = mean_diff - 1.96 * sd;
    r.loa_high = mean_diff + 1.96 * sd;
    double mean_m = 0;
    for (const auto& [m, diff] : r.points) mean_m += m;
    mean_m /= double(n);
    double sxx = 0, sxy = 0;
    for (const auto& [m, diff] : r.points) {
        sxx += (m - mean_m) * (m - mean_m);
        sxy += (m - mean_m) * (diff - mean_diff);
    }
    r.slope = sxx > 0 ? sxy / sxx : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Wilcoxon rank-sum. Exact enumeration over all C(n+m, n) labelings when
// min(n,m) <= 10 and n+m <= 20; tie-corrected normal approximation with
// continuity correction otherwise. Two-tailed p = min(1, 2 min(P<=, P>=)).
// ---------------------------------------------------------------------------

namespace stats_detail {

inline std::vector<double> midranks(const std::vector<double>& pooled_sorted) {
    const std::size_t n = pooled_sorted.size();
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && pooled_sorted[j + 1] == pooled_sorted[i]) ++j;
        const double rank = 0.5 * double(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) ranks[k] = rank;
        i = j + 1;
    }
    return ranks;
}

// enumerate rank sums over all n-subsets of the pooled midranks
inline void enumerate_ranksum(const std::vector<double>& ranks, std::size_t pick, std::size_t start,
                              double partial, double observed, std::size_t& count_le, std::size_t& count_ge,
                              std::size_t& total) {
    if (pick == 0) {
        ++total;
        if (partial <= observed + 1e-9) ++count_le;
        if (partial >= observed - 1e-9) ++count_ge;
        return;
    }
    for (std::size_t i = start; i + pick <= ranks.size(); ++i)
        enumerate_ranksum(ranks, pick - 1, i + 1, partial + ranks[i], observed, count_le, count_ge, total);
}

}  // namespace stats_detail

struct WilcoxonResult {
    double p_value = 1.0;
    double statistic_u = 0.0;
    bool exact = false;
};

inline WilcoxonResult wilcoxon_ranksum(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.empty() || y.empty()) throw ArgumentError("wilcoxon_ranksum: empty sample");
    const std::size_t n = x.size(), m = y.size();
    std::vector<std::pair<double, int>> pooled;
    pooled.reserve(n + m);
    for (double v : x) pooled.emplace_back(v, 0);
    for (double v : y) pooled.emplace_back(v, 1);
    std::sort(pooled.begin(), pooled.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> values(n + m);
    for (std::size_t i = 0; i < pooled.size(); ++i) values[i] = pooled[i].first;
    const auto ranks = stats_detail::midranks(values);
    double w = 0;
    for (std::size_t i = 0; i < pooled.size(); ++i)
        if (pooled[i].second == 0) w += ranks[i];

    WilcoxonResult out;
    out.statistic_u = w - double(n) * (n + 1) / 2.0;
    if (std::min(n, m) <= 10 && n + m <= 20) {
        out.exact = true;
        std::size_t count_le = 0, count_ge = 0, total = 0;
        stats_detail::enumerate_ranksum(ranks, n, 0, 0.0, w, count_le, count_ge, total);
        const double p = 2.0 * std::min(double(count_le), double(count_ge)) / double(total);
        out.p_value = std::min(1.0, p);
    } else {
        const double nn = double(n), mm = double(m), big = nn + mm;
        const double mean_u = nn * mm / 2.0;
        // tie correction
        double tie_term = 0;
        std::size_t i = 0;
        while (i < values.size()) {
            std::size_t j = i;
            while (j + 1 < values.size() && values[j + 1] == values[i]) ++j;
            const double t = double(j - i + 1);
            tie_term += t * t * t - t;
            i = j + 1;
        }
        const double var_u = nn * mm / 12.0 * (big + 1.0 - tie_term / (big * (big - 1.0)));
        if (var_u <= 0) {
            out.p_value = 1.0;
            return out;
        }
        const double diff = out.statistic_u - mean_u;
        const double cc = diff > 0 ? -0.5 : diff < 0 ? 0.5 : 0.0;  // continuity correction
        const double z = (diff + cc) / std::sqrt(var_u);
        out.p_value = std::min(1.0, 2.0 * normal_cdf(-std::abs(z)));
    }
    return out;
}

// Benjamini-Hochberg step-up adjustment, order-restored.
inline std::vector<double> bh_fdr(const std::vector<double>& pvalues) {
    for (double p : pvalues)
        if (p < 0.0 || p > 1.0) throw ArgumentError("bh_fdr: p-values must be in [0,1]");
    const std::size_t m = pvalues.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
    std::vector<double> adjusted(m);
    double running = 1.0;
    for (std::size_t k = m; k > 0; --k) {
        const std::size_t idx = order[k - 1];
        running = std::min(running, pvalues[idx] * double(m) / double(k));
        adjusted[idx] = running;
    }
    return adjusted;
}

// ---------------------------------------------------------------------------
// Fisher LDA with leave-one-out cross-validation and rank-based AUC.
// Scores are centered at the pooled class-mean midpoint of each training
// fold, which makes the LOO AUC exactly invariant to common invertible
// affine transforms of the features.
// ---------------------------------------------------------------------------

namespace stats_detail {

inline double auc_from_scores(const std::vector<double>& scores, const std::vector<int>& labels) {
    // rank statistic with midranks
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> sorted(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = scores[order[i]];
    const auto ranks = midranks(sorted);
    double rank_sum_pos = 0;
    std::size_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (labels[order[i]] == 1) {
            rank_sum_pos += ranks[i];
            ++n_pos;
        } else {
            ++n_neg;
        }
    }
    if (n_pos == 0 || n_neg == 0) throw ArgumentError("auc: both classes required");
    return (rank_sum_pos - double(n_pos) * (n_pos + 1) / 2.0) / (double(n_pos) * double(n_neg));
}

}  // namespace stats_detail

struct LdaAucResult {
    double auc = 0.5;
    std::vector<double> scores;  // per held-out subject
    bool ridge_warning = false;
};

inline LdaAucResult fisher_lda_auc(const MatX& points, const std::vector<int>& labels) {
    const int n = points.rows(), f = points.cols();
    if (int(labels.size()) != n) throw ArgumentError("fisher_lda_auc: label count mismatch");
    LdaAucResult out;
    out.scores.assign(std::size_t(n), 0.0);
    for (int held = 0; held < n; ++held) {
        std::vector<double> mu0(std::size_t(f), 0), mu1(std::size_t(f), 0);
        int n0 = 0, n1 = 0;
        for (int i = 0; i < n; ++i) {
            if (i == held) continue;
            auto& mu = labels[std::size_t(i)] == 1 ? mu1 : mu0;
            for (int j = 0; j < f; ++j) mu[std::size_t(j)] += points(i, j);
            (labels[std::size_t(i)] == 1 ? n1 : n0)++;
        }
        if (n0 == 0 || n1 == 0) throw ArgumentError("fisher_lda_auc: a fold lost a class");
        for (int j = 0; j < f; ++j) {
            mu0[std::size_t(j)] /= n0;
            mu1[std::size_t(j)] /= n1;
        }
        MatX sw(f, f);
        for (int i = 0; i < n; ++i) {
            if (i == held) continue;
            const auto& mu = labels[std::size_t(i)] == 1 ? mu1 : mu0;
            for (int a = 0; a < f; ++a)
                for (int b = 0; b < f; ++b)
                    sw(a, b) += (points(i, a) - mu[std::size_t(a)]) * (points(i, b) - mu[std::size_t(b)]);
        }
        std::vector<double> diff(static_cast<std::size_t>(f));
        for (int j = 0; j < f; ++j) diff[std::size_t(j)] = mu1[std::size_t(j)] - mu0[std::size_t(j)];
        std::vector<double> w;
        if (matrix_rank(sw) < f) {
            out.ridge_warning = true;
            for (int j = 0; j < f; ++j) sw(j, j) += 1e-6;
        }
        w = solve_dense(sw, diff);
        double score = 0;
        for (int j = 0; j < f; ++j)
            score += w[std::size_t(j)] * (points(held, j) - 0.5 * (mu0[std::size_t(j)] + mu1[std::size_t(j)]));
        out.scores[std::size_t(held)] = score;
    }
    out.auc = stats_detail::auc_from_scores(out.scores, labels);
    return out;
}

// ---------------------------------------------------------------------------
// Paired bootstrap of AUC differences over subjects (percentile two-sided p)
// ---------------------------------------------------------------------------

struct PairedBootstrapResult {
    double p_value = 1.0;
    double observed_diff = 0.0;
    std::size_t rejected_replicates = 0;
};

inline PairedBootstrapResult paired_bootstrap_auc_diff(const std::vector<double>& scores_a,
                                                       const std::vector<double>& scores_b,
                                                       const std::vector<int>& labels, int iterations,
                                                       Rng& rng) {
    const std::size_t n = labels.size();
    if (scores_a.size() != n || scores_b.size() != n)
        throw ArgumentError("paired_bootstrap_auc_diff: size mismatch");
    PairedBootstrapResult out;
    out.observed_diff =
        stats_detail::auc_from_scores(scores_a, labels) - stats_detail::auc_from_scores(scores_b, labels);
    std::size_t count_le = 0, count_ge = 0;
    for (int it = 0; it < iterations; ++it) {
        std::vector<double> ra, rb;
        std::vector<int> rl;
        ra.reserve(n);
        rb.reserve(n);
        rl.reserve(n);
        for (;;) {
            ra.clear();
            rb.clear();
            rl.clear();
            for (std::size_t i = 0; i < n; ++i) {
                const auto pick = std::size_t(rng.uniform_int(0, std::int64_t(n) - 1));
                ra.push_back(scores_a[pick]);
                rb.push_back(scores_b[pick]);
                rl.push_back(labels[pick]);
            }
            const bool has0 = std::find(rl.begin(), rl.end(), 0) != rl.end();
            const bool has1 = std::find(rl.begin(), rl.end(), 1) != rl.end();
            if (has0 && has1) break;
            ++out.rejected_replicates;
        }
        const double diff = stats_detail::auc_from_scores(ra, rl) - stats_detail::auc_from_scores(rb, rl);
        if (diff <= 0) ++count_le;
        if (diff >= 0) ++count_ge;
    }
    out.p_value = std::min(1.0, 2.0 * std::min(double(count_le), double(count_ge)) / double(iterations));
    return out;
}

// Pools z-scoring across the entire subjects x tracts matrix (population
// moments), removing global intensity shifts per reconstruction.
inline MatX zscore_by_tract(const MatX& values) {
    const std::size_t total = std::size_t(values.rows()) * std::size_t(values.cols());
    if (total < 2) throw ArgumentError("zscore_by_tract: needs >= 2 entries");
    double mean = 0;
    for (double v : values.data()) mean += v;
    mean /= double(total);
    double var = 0;
    for (double v : values.data()) var += (v - mean) * (v - mean);
    var /= double(total);
    if (var <= 0) throw NumericalError("zscore_by_tract: zero variance");
    const double sd = std::sqrt(var);
    MatX out(values.rows(), values.cols());
    for (int i = 0; i < values.rows(); ++i)
        for (int j = 0; j < values.cols(); ++j) out(i, j) = (values(i, j) - mean) / sd;
    return out;
}

}  // namespace dtisr
