#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "dtisr/core.hpp"

namespace dtisr {

// Objective closure: returns f(x) and fills grad (same length as x).
using ObjectiveFn = std::function<double(const std::vector<double>&, std::vector<double>&)>;

struct AdamSettings {
    int steps = 200;
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    long t = 0;

    void ensure(std::size_t n) {
        if (m.size() != n) {
            m.assign(n, 0.0);
            v.assign(n, 0.0);
            t = 0;
        }
    }

    void step(std::vector<double>& x, const std::vector<double>& grad, double lr, double beta1,
              double beta2, double epsilon) {
        ensure(x.size());
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + epsilon);
        }
    }
};

struct AdamResult {
    std::vector<double> x;
    double value = 0.0;
    std::vector<double> history;
};

inline AdamResult adam_minimize(const ObjectiveFn& f, std::vector<double> x, const AdamSettings& s) {
    AdamState state;
    std::vector<double> grad(x.size());
    AdamResult out;
    for (int it = 0; it < s.steps; ++it) {
        const double v = f(x, grad);
        if (!std::isfinite(v)) throw NumericalError("adam: objective became non-finite");
        out.history.push_back(v);
        state.step(x, grad, s.learning_rate, s.beta1, s.beta2, s.epsilon);
    }
    std::vector<double> g(x.size());
    out.value = f(x, g);
    out.x = std::move(x);
    return out;
}

struct LbfgsSettings {
    int max_iterations = 100;
    int history = 10;
    double gradient_tolerance = 1e-6;
    double armijo_c1 = 1e-4;
    int max_line_search = 40;
};

struct LbfgsResult {
    std::vector<double> x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
    bool line_search_failed = false;
    std::vector<double> history;
};

// Two-loop-recursion L-BFGS with backtracking Armijo line search. Accepted
// steps strictly decrease the objective, so the value sequence is monotone
// non-increasing; on line-search failure the best-so-far iterate is returned
// with a warning status.
inline LbfgsResult lbfgs_minimize(const ObjectiveFn& f, std::vector<double> x, const LbfgsSettings& s) {
    const std::size_t n = x.size();
    std::vector<double> grad(n);
    double value = f(x, grad);
    if (!std::isfinite(value)) throw NumericalError("lbfgs: objective non-finite at start");

    std::deque<std::vector<double>> s_hist, y_hist;
    std::deque<double> rho_hist;

    LbfgsResult out;
    out.history.push_back(value);

    for (int iter = 0; iter < s.max_iterations; ++iter) {
        double gnorm = 0;
        for (double g : grad) gnorm += g * g;
        gnorm = std::sqrt(gnorm);
        if (gnorm <= s.gradient_tolerance) {
            out.converged = true;
            break;
        }

        // two-loop recursion for the search direction
        std::vector<double> q = grad;
        std::vector<double> alpha(s_hist.size());
        for (int i = int(s_hist.size()) - 1; i >= 0; --i) {
            double si_q = 0;
            for (std::size_t k = 0; k < n; ++k) si_q += s_hist[std::size_t(i)][k] * q[k];
            alpha[std::size_t(i)] = rho_hist[std::size_t(i)] * si_q;
            for (std::size_t k = 0; k < n; ++k) q[k] -= alpha[std::size_t(i)] * y_hist[std::size_t(i)][k];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) {
            double sy = 0, yy = 0;
            for (std::size_t k = 0; k < n; ++k) {
                sy += s_hist.back()[k] * y_hist.back()[k];
                yy += y_hist.back()[k] * y_hist.back()[k];
            }
            if (yy > 0) gamma = sy / yy;
        }
        for (auto& qk : q) qk *= gamma;
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            double yi_q = 0;
            for (std::size_t k = 0; k < n; ++k) yi_q += y_hist[i][k] * q[k];
            const double beta = rho_hist[i] * yi_q;
            for (std::size_t k = 0; k < n; ++k) q[k] += (alpha[i] - beta) * s_hist[i][k];
        }
        std::vector<double> dir(n);
        for (std::size_t k = 0; k < n; ++k) dir[k] = -q[k];

        double dir_dot_grad = 0;
        for (std::size_t k = 0; k < n; ++k) dir_dot_grad += dir[k] * grad[k];
        if (dir_dot_grad >= 0) {  // not a descent direction; restart on steepest descent
            for (std::size_t k = 0; k < n; ++k) dir[k] = -grad[k];
            dir_dot_grad = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        double step = 1.0;
        std::vector<double> x_new(n), grad_new(n);
        double value_new = value;
        bool accepted = false;
        for (int ls = 0; ls < s.max_line_search; ++ls) {
            for (std::size_t k = 0; k < n; ++k) x_new[k] = x[k] + step * dir[k];
            value_new = f(x_new, grad_new);
            if (std::isfinite(value_new) && value_new <= value + s.armijo_c1 * step * dir_dot_grad) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            out.line_search_failed = true;
            break;
        }

        std::vector<double> s_vec(n), y_vec(n);
        double sy = 0;
        for (std::size_t k = 0; k < n; ++k) {
            s_vec[k] = x_new[k] - x[k];
            y_vec[k] = grad_new[k] - grad[k];
            sy += s_vec[k] * y_vec[k];
        }
        if (sy > 1e-12) {
            s_hist.push_back(std::move(s_vec));
            y_hist.push_back(std::move(y_vec));
            rho_hist.push_back(1.0 / sy);
            if (int(s_hist.size()) > s.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        x = std::move(x_new);
        grad = grad_new;
        value = value_new;
        out.history.push_back(value);
        out.iterations = iter + 1;
    }
    out.x = std::move(x);
    out.value = value;
    return out;
}

}  // namespace dtisr
