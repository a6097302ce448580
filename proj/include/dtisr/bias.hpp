#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dtisr/atlas.hpp"
#include "dtisr/core.hpp"
#include "dtisr/dct.hpp"
#include "dtisr/gradients.hpp"
#include "dtisr/optim.hpp"
#include "dtisr/tensor.hpp"
#include "dtisr/volume.hpp"

namespace dtisr {

struct CorrectionConfig {
    double lambda_c = 1e-2;   // coefficient magnitude weight
    double lambda_gm = 1.0;   // gray-matter FA^2 penalty weight
    AdamSettings adam{200, 1e-2, 0.9, 0.999, 1e-8};
    LbfgsSettings lbfgs{100, 10, 1e-6, 1e-4, 40};
    double fa_clip = 1e-6;
    double eig_gap_epsilon = 1e-9;
};

// Unnormalized Beta negative log-likelihood, as used in the MAP objective
// (the normalizing constant is irrelevant to the argmin because alpha/beta
// are fixed per voxel).
inline double beta_nll(double fa, double alpha, double beta, double fa_clip = 1e-6) {
    if (!(alpha > 0.0) || !(beta > 0.0)) throw ArgumentError("beta_nll: alpha/beta must be > 0");
    const double f = std::clamp(fa, fa_clip, 1.0 - fa_clip);
    return -((alpha - 1.0) * std::log(f) + (beta - 1.0) * std::log(1.0 - f));
}

inline double beta_nll_dfa(double fa, double alpha, double beta, double fa_clip = 1e-6) {
    if (fa <= fa_clip || fa >= 1.0 - fa_clip) return 0.0;
    return -((alpha - 1.0) / fa - (beta - 1.0) / (1.0 - fa));
}

// DSW negative log-likelihood: -kappa * FA * (v1_mu' v1)^2, minimized when
// v1 aligns with +-v1_mu.
inline double dsw_nll(const Vec3& v1, double fa, const Vec3& v1_mu, double kappa) {
    const double d = dot(v1_mu, v1);
    return -kappa * fa * d * d;
}

// ---------------------------------------------------------------------------
// Differentiable MAP objective (Beta + DSW + regularizers) over the DCT bias
// coefficients. The per-voxel chain is: log-bias -> corrected log signals ->
// OLS tensor fit -> eigendecomposition -> FA/V1 -> priors; every stage has a
// hand-derived adjoint, so the full gradient is analytic.
// ---------------------------------------------------------------------------

class MapObjective {
  public:
    // The internal differentiable fit runs on the diffusion-weighted rows
    // only, with the log-S0 intercept pinned at zero: the dataset is already
    // normalized by the EM-corrected mean low-b, which is what makes the
    // common multiplicative mode of the direction biases identifiable here.
    MapObjective(const DwiDataset& dataset, const AtlasPriors& atlas, const DctBiasBasis& basis,
                 const CorrectionConfig& config)
        : atlas_(atlas), basis_(basis), config_(config) {
        dataset.validate();
        atlas.validate();
        if (!grids_compatible(dataset.volume.grid, atlas.grid))
            throw ArgumentError("MapObjective: dataset/atlas grid mismatch");
        if (!grids_compatible(dataset.volume.grid, basis.grid()))
            throw ArgumentError("MapObjective: dataset/basis grid mismatch");

        dwi_rows_ = dataset.gradients.dwi_indices();
        n_dirs_ = int(dwi_rows_.size());

        // intercept-free design: y_d = -b_d u_d' D u_d against the six
        // unique tensor components
        MatX design(n_dirs_, 6);
        for (int d = 0; d < n_dirs_; ++d) {
            const double b = dataset.gradients.bvals[dwi_rows_[std::size_t(d)]];
            const Vec3& u = dataset.gradients.bvecs[dwi_rows_[std::size_t(d)]];
            design(d, 0) = -b * u[0] * u[0];
            design(d, 1) = -b * u[1] * u[1];
            design(d, 2) = -b * u[2] * u[2];
            design(d, 3) = -2.0 * b * u[0] * u[1];
            design(d, 4) = -2.0 * b * u[0] * u[2];
            design(d, 5) = -2.0 * b * u[1] * u[2];
        }
        if (matrix_rank(design) < 6)
            throw GeometryError("MapObjective: rank-deficient gradient geometry");
        const MatX dt = design.transposed();
        solve_op_ = solve_dense_multi(dt * design, dt);  // 6 x n_dirs

        const std::size_t n = dataset.volume.grid.voxel_count();
        const Volume lowb = dataset.mean_lowb();
        for (std::size_t v = 0; v < n; ++v) {
            if (atlas_.labels[v] == 0) continue;
            if (!(lowb.data[v] > 0.0)) continue;
            active_.push_back(v);
        }
        log_signals_.resize(active_.size() * std::size_t(n_dirs_));
        for (std::size_t a = 0; a < active_.size(); ++a) {
            const std::size_t v = active_[a];
            const double floor = std::max(1e-300, 1e-6 * lowb.data[v]);
            for (int d = 0; d < n_dirs_; ++d)
                log_signals_[a * std::size_t(n_dirs_) + std::size_t(d)] = std::log(
                    std::max(dataset.volume.data[dwi_rows_[std::size_t(d)] * n + v], floor));
        }
    }

    int direction_count() const { return n_dirs_; }
    std::size_t active_voxels() const { return active_.size(); }
    const std::vector<std::size_t>& dwi_rows() const { return dwi_rows_; }

    // value + gradient with respect to the flattened coefficients
    double evaluate(const std::vector<double>& flat_coeffs, std::vector<double>& grad) const {
        const int nb = DctBiasBasis::kCount;
        if (flat_coeffs.size() != std::size_t(n_dirs_ * nb))
            throw ArgumentError("MapObjective: coefficient size mismatch");
        grad.assign(flat_coeffs.size(), 0.0);

        const std::size_t rows = std::size_t(n_dirs_);
        std::vector<double> y(rows), dy(rows);
        std::vector<double> zeta(static_cast<std::size_t>(n_dirs_));
        std::array<double, 6> theta{}, dtheta{};

        double total = 0.0;
        for (std::size_t a = 0; a < active_.size(); ++a) {
            const std::size_t v = active_[a];
            for (int d = 0; d < n_dirs_; ++d) {
                double z = 0;
                for (int nidx = 0; nidx < nb; ++nidx)
                    z += flat_coeffs[std::size_t(d * nb + nidx)] * basis_.value(nidx, v);
                zeta[std::size_t(d)] = z;
            }
            for (std::size_t r = 0; r < rows; ++r) y[r] = log_signals_[a * rows + r] - zeta[r];
            for (int t = 0; t < 6; ++t) {
                double s = 0;
                for (std::size_t r = 0; r < rows; ++r) s += solve_op_(t, int(r)) * y[r];
                theta[std::size_t(t)] = s;
            }
            const DiffusionTensor tensor{theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]};
            const SymEigen3 eig = sym_eigen3(tensor.matrix());

            std::array<double, 3> lam{};
            for (int k = 0; k < 3; ++k) lam[std::size_t(k)] = std::max(0.0, eig.values[std::size_t(k)]);
            const double fa = fa_from_eigenvalues(lam[0], lam[1], lam[2]);
            const Vec3 v1 = eig.vectors[0];

            const int label = atlas_.labels[v];
            const double alpha = atlas_.alpha[std::size_t(label - 1)][v];
            const double beta = atlas_.beta[std::size_t(label - 1)][v];
            const Vec3& mu = atlas_.v1_mu[v];
            const double kappa = atlas_.kappa[v];

            double voxel_loss = beta_nll(fa, alpha, beta, config_.fa_clip) + dsw_nll(v1, fa, mu, kappa);
            double dfa = beta_nll_dfa(fa, alpha, beta, config_.fa_clip);
            const double mu_dot = dot(mu, v1);
            dfa += -kappa * mu_dot * mu_dot;
            Vec3 dv1 = (-2.0 * kappa * fa * mu_dot) * mu;
            if (label == int(Tissue::GM)) {
                voxel_loss += config_.lambda_gm * fa * fa;
                dfa += 2.0 * config_.lambda_gm * fa;
            }
            if (!std::isfinite(voxel_loss))
                throw NumericalError("MapObjective: non-finite loss at voxel " + voxel_name(v));
            total += voxel_loss;

            // FA -> clamped eigenvalues
            std::array<double, 3> dlam{};
            const double mean = (lam[0] + lam[1] + lam[2]) / 3.0;
            const double num = (lam[0] - mean) * (lam[0] - mean) + (lam[1] - mean) * (lam[1] - mean) +
                               (lam[2] - mean) * (lam[2] - mean);
            const double den = lam[0] * lam[0] + lam[1] * lam[1] + lam[2] * lam[2];
            if (den > 0.0 && fa > 0.0 && 1.5 * num / den < 1.0) {
                for (int k = 0; k < 3; ++k) {
                    const double dnum = 2.0 * (lam[std::size_t(k)] - mean);
                    const double dden = 2.0 * lam[std::size_t(k)];
                    const double dratio = (dnum * den - num * dden) / (den * den);
                    dlam[std::size_t(k)] = dfa * 0.75 * dratio / fa;  // d sqrt(1.5 r) = 1.5/(2 fa) dr
                }
            }
            // clamped eigenvalues pass gradient only when positive
            std::array<double, 3> dlam_raw{};
            for (int k = 0; k < 3; ++k)
                dlam_raw[std::size_t(k)] = eig.values[std::size_t(k)] > 0.0 ? dlam[std::size_t(k)] : 0.0;
            dtheta = sym_eigen3_adjoint(eig, dlam_raw, dv1, config_.eig_gap_epsilon);

            // back through theta = M y, then y_d = log S_d - zeta_d
            for (std::size_t r = 0; r < rows; ++r) {
                double s = 0;
                for (int t = 0; t < 6; ++t) s += solve_op_(t, int(r)) * dtheta[std::size_t(t)];
                dy[r] = s;
            }
            for (std::size_t r = 0; r < rows; ++r) {
                const double dzeta = -dy[r];
                for (int nidx = 0; nidx < nb; ++nidx)
                    grad[std::size_t(int(r) * nb + nidx)] += dzeta * basis_.value(nidx, v);
            }
        }

        for (std::size_t i = 0; i < flat_coeffs.size(); ++i) {
            total += config_.lambda_c * flat_coeffs[i] * flat_coeffs[i];
            grad[i] += 2.0 * config_.lambda_c * flat_coeffs[i];
        }
        if (!std::isfinite(total)) throw NumericalError("MapObjective: non-finite objective");
        return total;
    }

  private:
    std::string voxel_name(std::size_t v) const {
        const auto& d = basis_.grid().dims;
        const int x = int(v % std::size_t(d[0]));
        const int y = int((v / std::size_t(d[0])) % std::size_t(d[1]));
        const int z = int(v / (std::size_t(d[0]) * std::size_t(d[1])));
        return "(" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) + ")";
    }

    const AtlasPriors& atlas_;
    const DctBiasBasis& basis_;
    CorrectionConfig config_;
    MatX solve_op_;  // 6 x n_dirs, intercept-free OLS operator
    std::vector<std::size_t> dwi_rows_;
    int n_dirs_ = 0;
    std::vector<std::size_t> active_;
    std::vector<double> log_signals_;
};

// ---------------------------------------------------------------------------
// optimize_bias: ADAM burn-in followed by L-BFGS on the MAP objective. The
// input dataset is expected to be normalized by the bias-corrected mean
// low-b (see correct_lowb_em / bias_correct_pipeline).
// ---------------------------------------------------------------------------

// Exact minimization of the MAP objective over its analytically flat
// subspace: per-voxel direction patterns orthogonal to the tensor design
// columns never change the fitted tensor, so the data term is invariant and
// the coefficient regularizer alone decides them. Iterative steps leak into
// these dimensions (the preconditioning is not axis-aligned with them);
// projecting every spatial mode's direction pattern onto the design column
// space finishes the minimization in closed form.
inline void project_to_design_span(BiasCoefficients& coeffs, const std::vector<double>& bvals,
                                   const std::vector<Vec3>& bvecs) {
    const int nd = coeffs.directions;
    if (int(bvals.size()) != nd || int(bvecs.size()) != nd)
        throw ArgumentError("project_to_design_span: direction count mismatch");
    MatX a(nd, 6);
    for (int d = 0; d < nd; ++d) {
        const double b = bvals[std::size_t(d)];
        const Vec3& u = bvecs[std::size_t(d)];
        a(d, 0) = -b * u[0] * u[0];
        a(d, 1) = -b * u[1] * u[1];
        a(d, 2) = -b * u[2] * u[2];
        a(d, 3) = -2.0 * b * u[0] * u[1];
        a(d, 4) = -2.0 * b * u[0] * u[2];
        a(d, 5) = -2.0 * b * u[1] * u[2];
    }
    const MatX at = a.transposed();
    const MatX projector = a * solve_dense_multi(at * a, at);  // nd x nd
    for (int f = 0; f < DctBiasBasis::kCount; ++f) {
        std::vector<double> q(static_cast<std::size_t>(nd));
        for (int d = 0; d < nd; ++d) q[std::size_t(d)] = coeffs.c[std::size_t(d)][std::size_t(f)];
        for (int d = 0; d < nd; ++d) {
            double s = 0;
            for (int j = 0; j < nd; ++j) s += projector(d, j) * q[std::size_t(j)];
            coeffs.c[std::size_t(d)][std::size_t(f)] = s;
        }
    }
}

// Splits off the across-direction mean of the coefficients. The removed
// common mode is a direction-independent field that belongs with the low-b
// bias; keeping it separate makes the applied correction exactly
// gauge-invariant: shifting every direction's coefficients by a constant
// only rescales all channels uniformly, which the downstream tensor fit
// absorbs into its intercept.
inline std::array<double, DctBiasBasis::kCount> split_common_mode(BiasCoefficients& coeffs) {
    std::array<double, DctBiasBasis::kCount> common{};
    if (coeffs.directions == 0) return common;
    for (int f = 0; f < DctBiasBasis::kCount; ++f) {
        double mean = 0;
        for (const auto& row : coeffs.c) mean += row[std::size_t(f)];
        mean /= double(coeffs.directions);
        common[std::size_t(f)] = mean;
        for (auto& row : coeffs.c) row[std::size_t(f)] -= mean;
    }
    return common;
}

// Divides each b>0 channel by exp(zeta_i) for the given coefficient set.
inline DwiDataset apply_direction_bias_correction(const DwiDataset& dataset,
                                                  const BiasCoefficients& coeffs,
                                                  const DctBiasBasis& basis) {
    const auto dwi = dataset.gradients.dwi_indices();
    if (int(dwi.size()) != coeffs.directions)
        throw ArgumentError("apply_direction_bias_correction: direction count mismatch");
    DwiDataset out = dataset;
    const std::size_t n = dataset.volume.grid.voxel_count();
    for (int d = 0; d < coeffs.directions; ++d) {
        const auto zeta = basis.evaluate(coeffs.c[std::size_t(d)]);
        const std::size_t c = dwi[std::size_t(d)];
        for (std::size_t i = 0; i < n; ++i) out.volume.data[c * n + i] = dataset.volume.data[c * n + i] / std::exp(zeta[i]);
    }
    return out;
}

// Centered application: the across-direction mean field divides every
// channel (b=0 included), the demeaned per-direction fields divide their
// b>0 channels.
inline DwiDataset apply_bias_correction_centered(const DwiDataset& dataset, BiasCoefficients coeffs,
                                                 const DctBiasBasis& basis) {
    const auto common = split_common_mode(coeffs);
    DwiDataset out = apply_direction_bias_correction(dataset, coeffs, basis);
    const auto common_field = basis.evaluate(common);
    const std::size_t n = dataset.volume.grid.voxel_count();
    for (int c = 0; c < out.volume.channels; ++c)
        for (std::size_t i = 0; i < n; ++i) out.volume.data[std::size_t(c) * n + i] /= std::exp(common_field[i]);
    return out;
}

struct OptimizeBiasResult {
    BiasCoefficients coefficients;  // demeaned across directions
    std::array<double, DctBiasBasis::kCount> common_mode{};
    DwiDataset corrected;  // each S_i divided by exp(zeta_i); common mode applied to all channels
    double initial_objective = 0.0;
    double adam_handoff_objective = 0.0;
    double final_objective = 0.0;
    bool lbfgs_converged = false;
    bool line_search_warning = false;
};

inline OptimizeBiasResult optimize_bias(const DwiDataset& dataset, const AtlasPriors& atlas,
                                        const CorrectionConfig& config) {
    const DctBiasBasis basis(dataset.volume.grid);
    const MapObjective objective(dataset, atlas, basis, config);
    if (objective.active_voxels() == 0)
        throw NumericalError("optimize_bias: no labeled voxels with signal");
    const ObjectiveFn fn = [&](const std::vector<double>& x, std::vector<double>& g) {
        return objective.evaluate(x, g);
    };

    std::vector<double> x0(std::size_t(objective.direction_count()) * DctBiasBasis::kCount, 0.0);
    OptimizeBiasResult result;
    {
        std::vector<double> g0(x0.size());
        result.initial_objective = fn(x0, g0);
    }
    const AdamResult warm = adam_minimize(fn, x0, config.adam);
    result.adam_handoff_objective = warm.value;
    LbfgsResult refined = lbfgs_minimize(fn, warm.x, config.lbfgs);
    // L-BFGS accepts only decreasing steps, so this never exceeds the handoff
    result.final_objective = std::min(refined.value, warm.value);
    result.lbfgs_converged = refined.converged;
    result.line_search_warning = refined.line_search_failed;
    const auto& best = refined.value <= warm.value ? refined.x : warm.x;
    result.coefficients = BiasCoefficients::from_flat(best, objective.direction_count());
    {
        std::vector<double> bvals;
        std::vector<Vec3> bvecs;
        for (auto i : dataset.gradients.dwi_indices()) {
            bvals.push_back(dataset.gradients.bvals[i]);
            bvecs.push_back(dataset.gradients.bvecs[i]);
        }
        project_to_design_span(result.coefficients, bvals, bvecs);
    }
    result.common_mode = split_common_mode(result.coefficients);

    result.corrected = apply_direction_bias_correction(dataset, result.coefficients, basis);
    const auto common_field = basis.evaluate(result.common_mode);
    const std::size_t n = dataset.volume.grid.voxel_count();
    for (int c = 0; c < result.corrected.volume.channels; ++c)
        for (std::size_t i = 0; i < n; ++i)
            result.corrected.volume.data[std::size_t(c) * n + i] /= std::exp(common_field[i]);
    return result;
}

// ---------------------------------------------------------------------------
// Low-b bias correction by Expectation Maximization under per-class Gaussian
// log-intensity models. Removes the gauge shared by all directions; the
// estimated log field is centered to zero mean over the estimation mask.
// ---------------------------------------------------------------------------

struct LowbEmResult {
    Volume corrected;       // lowb / exp(beta)
    Volume field;           // exp(beta), the multiplicative low-b bias
    std::array<double, DctBiasBasis::kCount> coefficients{};
    std::vector<double> loglik_history;
    std::vector<std::string> warnings;
    int iterations = 0;
};

struct LowbEmSettings {
    int max_iterations = 200;
    double tolerance = 1e-6;  // relative log-likelihood change
    double variance_floor = 1e-8;
};

inline LowbEmResult correct_lowb_em(const Volume& lowb, const Volume& tissue_probs,
                                    const DctBiasBasis& basis, const LowbEmSettings& settings = {}) {
    if (tissue_probs.channels != kTissueClasses)
        throw ArgumentError("correct_lowb_em: tissue_probs must have 3 channels");
    if (!grids_compatible(lowb.grid, tissue_probs.grid) || !grids_compatible(lowb.grid, basis.grid()))
        throw ArgumentError("correct_lowb_em: grid mismatch");
    const std::size_t n = lowb.grid.voxel_count();

    std::vector<std::size_t> mask;
    for (std::size_t i = 0; i < n; ++i) {
        double psum = 0;
        for (int k = 0; k < kTissueClasses; ++k) psum += tissue_probs.data[std::size_t(k) * n + i];
        if (psum <= 1e-3) continue;  // outside estimation region
        if (std::abs(psum - 1.0) > 1e-3)
            throw ArgumentError("correct_lowb_em: tissue probabilities must sum to 1 within 1e-3");
        if (lowb.data[i] > 0.0) mask.push_back(i);
    }
    if (mask.empty()) throw ArgumentError("correct_lowb_em: empty estimation mask");

    const std::size_t m = mask.size();
    std::vector<double> g(m);
    for (std::size_t j = 0; j < m; ++j) g[j] = std::log(lowb.data[mask[j]]);

    std::array<double, DctBiasBasis::kCount> coeffs{};
    std::vector<double> beta_field(m, 0.0);

    std::array<double, kTissueClasses> mu{}, var{};
    std::array<bool, kTissueClasses> active_class{};
    {
        std::array<double, kTissueClasses> wsum{};
        for (std::size_t j = 0; j < m; ++j)
            for (int k = 0; k < kTissueClasses; ++k) {
                const double w = tissue_probs.data[std::size_t(k) * n + mask[j]];
                mu[std::size_t(k)] += w * g[j];
                wsum[std::size_t(k)] += w;
            }
        double gvar = 0;
        const double gmean = mean_of(g);
        for (double v : g) gvar += (v - gmean) * (v - gmean);
        gvar = std::max(settings.variance_floor, gvar / double(m));
        for (int k = 0; k < kTissueClasses; ++k) {
            active_class[std::size_t(k)] = wsum[std::size_t(k)] > 1e-9;
            mu[std::size_t(k)] = active_class[std::size_t(k)] ? mu[std::size_t(k)] / wsum[std::size_t(k)] : gmean;
            var[std::size_t(k)] = gvar;
        }
    }

    LowbEmResult out;
    std::vector<double> resp(m * kTissueClasses);
    double prev_loglik = -1e300;
    for (int iter = 0; iter < settings.max_iterations; ++iter) {
        // E-step and observed log-likelihood
        double loglik = 0;
        for (std::size_t j = 0; j < m; ++j) {
            double total = 0;
            std::array<double, kTissueClasses> lik{};
            for (int k = 0; k < kTissueClasses; ++k) {
                if (!active_class[std::size_t(k)]) continue;
                const double pi = tissue_probs.data[std::size_t(k) * n + mask[j]];
                if (pi <= 0) continue;
                const double r = g[j] - beta_field[j] - mu[std::size_t(k)];
                lik[std::size_t(k)] = pi * std::exp(-0.5 * r * r / var[std::size_t(k)]) /
                                      std::sqrt(2.0 * kPi * var[std::size_t(k)]);
                total += lik[std::size_t(k)];
            }
            if (total <= 0) {
                for (int k = 0; k < kTissueClasses; ++k)
                    resp[j * kTissueClasses + std::size_t(k)] =
                        active_class[std::size_t(k)] ? 1.0 / double(kTissueClasses) : 0.0;
                loglik += -700.0;
            } else {
                for (int k = 0; k < kTissueClasses; ++k)
                    resp[j * kTissueClasses + std::size_t(k)] = lik[std::size_t(k)] / total;
                loglik += std::log(total);
            }
        }
        out.loglik_history.push_back(loglik);
        out.iterations = iter + 1;
        if (iter > 0 && std::abs(loglik - prev_loglik) < settings.tolerance * std::max(1.0, std::abs(loglik)))
            break;
        prev_loglik = loglik;

        // M-step: class means/variances
        for (int k = 0; k < kTissueClasses; ++k) {
            if (!active_class[std::size_t(k)]) continue;
            double wsum = 0, wmean = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const double w = resp[j * kTissueClasses + std::size_t(k)];
                wsum += w;
                wmean += w * (g[j] - beta_field[j]);
            }
            if (wsum <= 1e-9) {
                active_class[std::size_t(k)] = false;
                out.warnings.push_back("class " + std::to_string(k) + " dropped (zero responsibility)");
                continue;
            }
            wmean /= wsum;
            double wvar = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const double w = resp[j * kTissueClasses + std::size_t(k)];
                const double r = g[j] - beta_field[j] - wmean;
                wvar += w * r * r;
            }
            mu[std::size_t(k)] = wmean;
            var[std::size_t(k)] = std::max(settings.variance_floor, wvar / wsum);
        }

        // M-step: bias coefficients by precision-weighted projection
        std::vector<double> weights(n, 0.0), target(n, 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            double p = 0, t = 0;
            for (int k = 0; k < kTissueClasses; ++k) {
                if (!active_class[std::size_t(k)]) continue;
                const double w = resp[j * kTissueClasses + std::size_t(k)] / var[std::size_t(k)];
                p += w;
                t += w * (g[j] - mu[std::size_t(k)]);
            }
            weights[mask[j]] = p;
            target[mask[j]] = p > 0 ? t / p : 0.0;
        }
        coeffs = basis.project_weighted(target, weights);

        // center the log field over the mask; constant goes into the means
        for (std::size_t j = 0; j < m; ++j) {
            double z = 0;
            for (int f = 0; f < DctBiasBasis::kCount; ++f) z += coeffs[std::size_t(f)] * basis.value(f, mask[j]);
            beta_field[j] = z;
        }
        const double center = mean_of(beta_field);
        coeffs[0] -= center;
        for (auto& b : beta_field) b -= center;
        for (int k = 0; k < kTissueClasses; ++k)
            if (active_class[std::size_t(k)]) mu[std::size_t(k)] += center;
    }

    out.coefficients = coeffs;
    const auto full_beta = basis.evaluate(coeffs);
    out.field = Volume(lowb.grid, 1);
    out.corrected = Volume(lowb.grid, 1);
    for (std::size_t i = 0; i < n; ++i) {
        out.field.data[i] = std::exp(full_beta[i]);
        out.corrected.data[i] = lowb.data[i] / out.field.data[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// End-to-end correction pipeline: EM low-b correction, per-voxel S_i / S0
// normalization, direction-specific MAP optimization, and assembly of the
// corrected dataset in original units.
// ---------------------------------------------------------------------------

struct BiasPipelineResult {
    DwiDataset corrected;       // original scale, low-b and direction bias removed
    BiasCoefficients coefficients;
    Volume lowb_field;          // exp(beta)
    Volume direction_fields;    // one channel per b>0 direction: exp(zeta_i)
    OptimizeBiasResult optimization;
    LowbEmResult lowb_em;
};

inline Volume one_hot_tissue_probs(const AtlasPriors& atlas) {
    Volume probs(atlas.grid, kTissueClasses);
    const std::size_t n = atlas.grid.voxel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const int lab = atlas.labels[i];
        if (lab > 0) probs.data[std::size_t(lab - 1) * n + i] = 1.0;
    }
    return probs;
}

inline BiasPipelineResult bias_correct_pipeline(const DwiDataset& dataset, const AtlasPriors& atlas,
                                                const CorrectionConfig& config) {
    dataset.validate();
    const DctBiasBasis basis(dataset.volume.grid);
    const Volume lowb = dataset.mean_lowb();
    const Volume probs = one_hot_tissue_probs(atlas);

    BiasPipelineResult out;
    out.lowb_em = correct_lowb_em(lowb, probs, basis);

    // normalize by the corrected mean low-b before direction-specific work
    const std::size_t n = dataset.volume.grid.voxel_count();
    DwiDataset normalized = dataset;
    for (std::size_t i = 0; i < n; ++i) {
        const double s0 = out.lowb_em.corrected.data[i];
        const double denom = s0 > 0.0 ? s0 : 1.0;
        for (int c = 0; c < dataset.volume.channels; ++c)
            normalized.volume.data[std::size_t(c) * n + i] =
                dataset.volume.data[std::size_t(c) * n + i] / out.lowb_em.field.data[i] / denom;
    }

    out.optimization = optimize_bias(normalized, atlas, config);
    out.coefficients = out.optimization.coefficients;

    // the common mode of the direction fields is direction-independent bias
    // and is folded into the low-b field
    const auto common_field = basis.evaluate(out.optimization.common_mode);
    out.lowb_field = out.lowb_em.field;
    for (std::size_t i = 0; i < n; ++i) out.lowb_field.data[i] *= std::exp(common_field[i]);

    const auto dwi = dataset.gradients.dwi_indices();
    out.direction_fields = Volume(dataset.volume.grid, int(dwi.size()));
    out.corrected = dataset;
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < dataset.volume.channels; ++c)
            out.corrected.volume.data[std::size_t(c) * n + i] /= out.lowb_field.data[i];
    for (int d = 0; d < int(dwi.size()); ++d) {
        const auto zeta = basis.evaluate(out.coefficients.c[std::size_t(d)]);
        const std::size_t c = dwi[std::size_t(d)];
        for (std::size_t i = 0; i < n; ++i) {
            const double f = std::exp(zeta[i]);
            out.direction_fields.data[std::size_t(d) * n + i] = f;
            out.corrected.volume.data[c * n + i] /= f;
        }
    }
    return out;
}

}  // namespace dtisr
