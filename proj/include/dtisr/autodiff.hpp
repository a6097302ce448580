#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "dtisr/core.hpp"

namespace dtisr::ad {

// Minimal reverse-mode tape over dense double tensors. The operator set is
// fixed (conv3, pooling, transposed conv, layer norm, GELU, matrix ops,
// softmax, resampling) and every adjoint is hand-written and covered by
// finite-difference tests.

struct Tensor {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    return n;
}

inline TensorPtr make_tensor(const std::vector<int>& shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->shape = shape;
    t->value.assign(shape_size(shape), 0.0);
    t->grad.assign(shape_size(shape), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

class Tape {
  public:
    TensorPtr tensor(const std::vector<int>& shape) {
        auto t = make_tensor(shape, true);
        return t;
    }

    void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

    void backward(const TensorPtr& root) {
        if (root->size() != 1) throw ArgumentError("backward: root must be a scalar");
        root->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }

  private:
    std::vector<std::function<void()>> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw ArgumentError("add: shape mismatch");
    auto out = tape.tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + b->value[i];
    tape.record([a, b, out] {
        for (std::size_t i = 0; i < out->size(); ++i) {
            a->grad[i] += out->grad[i];
            b->grad[i] += out->grad[i];
        }
    });
    return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, double s) {
    auto out = tape.tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = s * a->value[i];
    tape.record([a, out, s] {
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += s * out->grad[i];
    });
    return out;
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
    return cdf + x * pdf;
}

inline TensorPtr gelu(Tape& tape, const TensorPtr& a) {
    auto out = tape.tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = gelu_value(a->value[i]);
    tape.record([a, out] {
        for (std::size_t i = 0; i < out->size(); ++i)
            a->grad[i] += gelu_derivative(a->value[i]) * out->grad[i];
    });
    return out;
}

// Layer normalization over the last dimension with learned gain/bias.
inline TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                            double eps = 1e-6) {
    const int f = x->shape.back();
    if (gain->shape != std::vector<int>{f} || bias->shape != std::vector<int>{f})
        throw ArgumentError("layer_norm: gain/bias must match the last dimension");
    const std::size_t rows = x->size() / std::size_t(f);
    auto out = tape.tensor(x->shape);
    auto xhat = std::make_shared<std::vector<double>>(x->size());
    auto inv_sigma = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xv = x->value.data() + r * std::size_t(f);
        double mean = 0;
        for (int i = 0; i < f; ++i) mean += xv[i];
        mean /= f;
        double var = 0;
        for (int i = 0; i < f; ++i) var += (xv[i] - mean) * (xv[i] - mean);
        var /= f;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[r] = is;
        for (int i = 0; i < f; ++i) {
            const double xh = (xv[i] - mean) * is;
            (*xhat)[r * std::size_t(f) + std::size_t(i)] = xh;
            out->value[r * std::size_t(f) + std::size_t(i)] = gain->value[std::size_t(i)] * xh + bias->value[std::size_t(i)];
        }
    }
    tape.record([x, gain, bias, out, xhat, inv_sigma, f, rows] {
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * std::size_t(f);
            double mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (int i = 0; i < f; ++i) {
                const double dxh = out->grad[off + std::size_t(i)] * gain->value[std::size_t(i)];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * (*xhat)[off + std::size_t(i)];
            }
            mean_dxhat /= f;
            mean_dxhat_xhat /= f;
            for (int i = 0; i < f; ++i) {
                const double dxh = out->grad[off + std::size_t(i)] * gain->value[std::size_t(i)];
                x->grad[off + std::size_t(i)] +=
                    (*inv_sigma)[r] * (dxh - mean_dxhat - (*xhat)[off + std::size_t(i)] * mean_dxhat_xhat);
                gain->grad[std::size_t(i)] += out->grad[off + std::size_t(i)] * (*xhat)[off + std::size_t(i)];
                bias->grad[std::size_t(i)] += out->grad[off + std::size_t(i)];
            }
        }
    });
    return out;
}

// Layer normalization over the middle axis of a (V, N, F) tensor: per
// (sample, feature) pair the N entries are standardized, then scaled and
// shifted by per-feature gain/bias.
inline TensorPtr layer_norm_mid(Tape& tape, const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                                double eps = 1e-6) {
    if (x->shape.size() != 3) throw ArgumentError("layer_norm_mid: 3-D tensor required");
    const int v_count = x->shape[0], n = x->shape[1], f = x->shape[2];
    if (gain->shape != std::vector<int>{f} || bias->shape != std::vector<int>{f})
        throw ArgumentError("layer_norm_mid: gain/bias must match the feature dimension");
    auto out = tape.tensor(x->shape);
    auto xhat = std::make_shared<std::vector<double>>(x->size());
    auto inv_sigma = std::make_shared<std::vector<double>>(std::size_t(v_count) * std::size_t(f));
    auto idx = [=](int v, int a, int ff) {
        return (std::size_t(v) * std::size_t(n) + std::size_t(a)) * std::size_t(f) + std::size_t(ff);
    };
    for (int v = 0; v < v_count; ++v)
        for (int ff = 0; ff < f; ++ff) {
            double mean = 0;
            for (int a = 0; a < n; ++a) mean += x->value[idx(v, a, ff)];
            mean /= n;
            double var = 0;
            for (int a = 0; a < n; ++a) {
                const double d = x->value[idx(v, a, ff)] - mean;
                var += d * d;
            }
            var /= n;
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_sigma)[std::size_t(v) * std::size_t(f) + std::size_t(ff)] = is;
            for (int a = 0; a < n; ++a) {
                const double xh = (x->value[idx(v, a, ff)] - mean) * is;
                (*xhat)[idx(v, a, ff)] = xh;
                out->value[idx(v, a, ff)] = gain->value[std::size_t(ff)] * xh + bias->value[std::size_t(ff)];
            }
        }
    tape.record([x, gain, bias, out, xhat, inv_sigma, v_count, n, f, idx] {
        for (int v = 0; v < v_count; ++v)
            for (int ff = 0; ff < f; ++ff) {
                double mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (int a = 0; a < n; ++a) {
                    const double dxh = out->grad[idx(v, a, ff)] * gain->value[std::size_t(ff)];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * (*xhat)[idx(v, a, ff)];
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                const double is = (*inv_sigma)[std::size_t(v) * std::size_t(f) + std::size_t(ff)];
                for (int a = 0; a < n; ++a) {
                    const double dxh = out->grad[idx(v, a, ff)] * gain->value[std::size_t(ff)];
                    x->grad[idx(v, a, ff)] += is * (dxh - mean_dxhat - (*xhat)[idx(v, a, ff)] * mean_dxhat_xhat);
                    gain->grad[std::size_t(ff)] += out->grad[idx(v, a, ff)] * (*xhat)[idx(v, a, ff)];
                    bias->grad[std::size_t(ff)] += out->grad[idx(v, a, ff)];
                }
            }
    });
    return out;
}

inline TensorPtr softmax_rows(Tape& tape, const TensorPtr& x) {
    const int cols = x->shape.back();
    const std::size_t rows = x->size() / std::size_t(cols);
    auto out = tape.tensor(x->shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * std::size_t(cols);
        double mx = -1e300;
        for (int c = 0; c < cols; ++c) mx = std::max(mx, x->value[off + std::size_t(c)]);
        double sum = 0;
        for (int c = 0; c < cols; ++c) {
            out->value[off + std::size_t(c)] = std::exp(x->value[off + std::size_t(c)] - mx);
            sum += out->value[off + std::size_t(c)];
        }
        for (int c = 0; c < cols; ++c) out->value[off + std::size_t(c)] /= sum;
    }
    tape.record([x, out, cols, rows] {
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * std::size_t(cols);
            double dot = 0;
            for (int c = 0; c < cols; ++c) dot += out->grad[off + std::size_t(c)] * out->value[off + std::size_t(c)];
            for (int c = 0; c < cols; ++c)
                x->grad[off + std::size_t(c)] +=
                    out->value[off + std::size_t(c)] * (out->grad[off + std::size_t(c)] - dot);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D)
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b, bool transpose_b = false) {
    if (a->shape.size() != 2 || b->shape.size() != 2) throw ArgumentError("matmul: 2-D tensors required");
    const int m = a->shape[0], k = a->shape[1];
    const int bk = transpose_b ? b->shape[1] : b->shape[0];
    const int n = transpose_b ? b->shape[0] : b->shape[1];
    if (k != bk) throw ArgumentError("matmul: inner dimension mismatch");
    auto out = tape.tensor({m, n});
    auto bval = [&](int i, int j) { return transpose_b ? b->value[std::size_t(j) * std::size_t(k) + std::size_t(i)]
                                                       : b->value[std::size_t(i) * std::size_t(n) + std::size_t(j)]; };
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int p = 0; p < k; ++p) s += a->value[std::size_t(i) * std::size_t(k) + std::size_t(p)] * bval(p, j);
            out->value[std::size_t(i) * std::size_t(n) + std::size_t(j)] = s;
        }
    tape.record([a, b, out, m, n, k, transpose_b] {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double go = out->grad[std::size_t(i) * std::size_t(n) + std::size_t(j)];
                if (go == 0.0) continue;
                for (int p = 0; p < k; ++p) {
                    const std::size_t ai = std::size_t(i) * std::size_t(k) + std::size_t(p);
                    const std::size_t bi = transpose_b ? std::size_t(j) * std::size_t(k) + std::size_t(p)
                                                       : std::size_t(p) * std::size_t(n) + std::size_t(j);
                    a->grad[ai] += go * b->value[bi];
                    b->grad[bi] += go * a->value[ai];
                }
            }
    });
    return out;
}

inline TensorPtr mean_rows(Tape& tape, const TensorPtr& x) {
    const int cols = x->shape.back();
    const std::size_t rows = x->size() / std::size_t(cols);
    auto out = tape.tensor({cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out->value[std::size_t(c)] += x->value[r * std::size_t(cols) + std::size_t(c)];
    for (int c = 0; c < cols; ++c) out->value[std::size_t(c)] /= double(rows);
    tape.record([x, out, cols, rows] {
        for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                x->grad[r * std::size_t(cols) + std::size_t(c)] += out->grad[std::size_t(c)] / double(rows);
    });
    return out;
}

// out[r, :] = x[r, :] + v for every row
inline TensorPtr add_row_broadcast(Tape& tape, const TensorPtr& x, const TensorPtr& v) {
    const int cols = x->shape.back();
    if (v->shape != std::vector<int>{cols}) throw ArgumentError("add_row_broadcast: shape mismatch");
    const std::size_t rows = x->size() / std::size_t(cols);
    auto out = tape.tensor(x->shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out->value[r * std::size_t(cols) + std::size_t(c)] =
                x->value[r * std::size_t(cols) + std::size_t(c)] + v->value[std::size_t(c)];
    tape.record([x, v, out, cols, rows] {
        for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                x->grad[r * std::size_t(cols) + std::size_t(c)] += out->grad[r * std::size_t(cols) + std::size_t(c)];
                v->grad[std::size_t(c)] += out->grad[r * std::size_t(cols) + std::size_t(c)];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Volumetric ops. Feature maps are (C, D, H, W), W fastest.
// ---------------------------------------------------------------------------

inline TensorPtr conv3d(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (x->shape.size() != 4 || w->shape.size() != 5) throw ArgumentError("conv3d: bad shapes");
    const int cin = x->shape[0], dd = x->shape[1], hh = x->shape[2], ww = x->shape[3];
    const int cout = w->shape[0];
    if (w->shape[1] != cin || w->shape[2] != 3 || w->shape[3] != 3 || w->shape[4] != 3)
        throw ArgumentError("conv3d: kernel must be (Cout, Cin, 3, 3, 3)");
    if (b->shape != std::vector<int>{cout}) throw ArgumentError("conv3d: bias shape mismatch");

    auto out = tape.tensor({cout, dd, hh, ww});
    const std::size_t plane = std::size_t(dd) * std::size_t(hh) * std::size_t(ww);
    const std::size_t hw = std::size_t(hh) * std::size_t(ww);

    for (int co = 0; co < cout; ++co) {
        double* ov = out->value.data() + std::size_t(co) * plane;
        const double bias = b->value[std::size_t(co)];
        for (std::size_t i = 0; i < plane; ++i) ov[i] = bias;
        for (int ci = 0; ci < cin; ++ci) {
            const double* xv = x->value.data() + std::size_t(ci) * plane;
            for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const double wv =
                            w->value[(((std::size_t(co) * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                        if (wv == 0.0) continue;
                        const int dz = kz - 1, dy = ky - 1, dx = kx - 1;
                        const int z0 = std::max(0, -dz), z1 = std::min(dd, dd - dz);
                        const int y0 = std::max(0, -dy), y1 = std::min(hh, hh - dy);
                        const int x0 = std::max(0, -dx), x1 = std::min(ww, ww - dx);
                        for (int z = z0; z < z1; ++z)
                            for (int y = y0; y < y1; ++y) {
                                double* orow = ov + std::size_t(z) * hw + std::size_t(y) * ww;
                                const double* xrow =
                                    xv + std::size_t(z + dz) * hw + std::size_t(y + dy) * ww + dx;
                                for (int xi = x0; xi < x1; ++xi) orow[xi] += wv * xrow[xi];
                            }
                    }
        }
    }
    tape.record([x, w, b, out, cin, cout, dd, hh, ww, plane, hw] {
        for (int co = 0; co < cout; ++co) {
            const double* og = out->grad.data() + std::size_t(co) * plane;
            double bacc = 0;
            for (std::size_t i = 0; i < plane; ++i) bacc += og[i];
            b->grad[std::size_t(co)] += bacc;
            for (int ci = 0; ci < cin; ++ci) {
                double* xg = x->grad.data() + std::size_t(ci) * plane;
                const double* xv = x->value.data() + std::size_t(ci) * plane;
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const std::size_t widx =
                                (((std::size_t(co) * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                            const double wv = w->value[widx];
                            const int dz = kz - 1, dy = ky - 1, dx = kx - 1;
                            const int z0 = std::max(0, -dz), z1 = std::min(dd, dd - dz);
                            const int y0 = std::max(0, -dy), y1 = std::min(hh, hh - dy);
                            const int x0 = std::max(0, -dx), x1 = std::min(ww, ww - dx);
                            double wacc = 0;
                            for (int z = z0; z < z1; ++z)
                                for (int y = y0; y < y1; ++y) {
                                    const double* ogrow = og + std::size_t(z) * hw + std::size_t(y) * ww;
                                    double* xgrow = xg + std::size_t(z + dz) * hw + std::size_t(y + dy) * ww + dx;
                                    const double* xvrow = xv + std::size_t(z + dz) * hw + std::size_t(y + dy) * ww + dx;
                                    for (int xi = x0; xi < x1; ++xi) {
                                        xgrow[xi] += wv * ogrow[xi];
                                        wacc += xvrow[xi] * ogrow[xi];
                                    }
                                }
                            w->grad[widx] += wacc;
                        }
            }
        }
    });
    return out;
}

inline TensorPtr mean_pool2(Tape& tape, const TensorPtr& x) {
    const int c = x->shape[0], dd = x->shape[1], hh = x->shape[2], ww = x->shape[3];
    if (dd % 2 || hh % 2 || ww % 2) throw ArgumentError("mean_pool2: dims must be even");
    const int od = dd / 2, oh = hh / 2, ow = ww / 2;
    auto out = tape.tensor({c, od, oh, ow});
    auto in_idx = [=](int ci, int z, int y, int xx) {
        return ((std::size_t(ci) * dd + z) * std::size_t(hh) + y) * std::size_t(ww) + xx;
    };
    auto out_idx = [=](int ci, int z, int y, int xx) {
        return ((std::size_t(ci) * od + z) * std::size_t(oh) + y) * std::size_t(ow) + xx;
    };
    for (int ci = 0; ci < c; ++ci)
        for (int z = 0; z < od; ++z)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    double s = 0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                s += x->value[in_idx(ci, 2 * z + dz, 2 * y + dy, 2 * xx + dx)];
                    out->value[out_idx(ci, z, y, xx)] = s / 8.0;
                }
    tape.record([x, out, c, od, oh, ow, in_idx, out_idx] {
        for (int ci = 0; ci < c; ++ci)
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        const double g = out->grad[out_idx(ci, z, y, xx)] / 8.0;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    x->grad[in_idx(ci, 2 * z + dz, 2 * y + dy, 2 * xx + dx)] += g;
                    }
    });
    return out;
}

// 2x2x2 stride-2 transposed convolution; kernel (Cin, Cout, 2, 2, 2).
inline TensorPtr transposed_conv2(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    const int cin = x->shape[0], dd = x->shape[1], hh = x->shape[2], ww = x->shape[3];
    if (w->shape[0] != cin || w->shape[2] != 2 || w->shape[3] != 2 || w->shape[4] != 2)
        throw ArgumentError("transposed_conv2: kernel must be (Cin, Cout, 2, 2, 2)");
    const int cout = w->shape[1];
    const int od = dd * 2, oh = hh * 2, ow = ww * 2;
    auto out = tape.tensor({cout, od, oh, ow});
    auto in_idx = [=](int ci, int z, int y, int xx) {
        return ((std::size_t(ci) * dd + z) * std::size_t(hh) + y) * std::size_t(ww) + xx;
    };
    auto out_idx = [=](int co, int z, int y, int xx) {
        return ((std::size_t(co) * od + z) * std::size_t(oh) + y) * std::size_t(ow) + xx;
    };
    auto w_idx = [=](int ci, int co, int kz, int ky, int kx) {
        return (((std::size_t(ci) * cout + co) * 2 + kz) * 2 + ky) * 2 + kx;
    };
    for (int co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < std::size_t(od) * oh * ow; ++i)
            out->value[std::size_t(co) * std::size_t(od) * oh * ow + i] = b->value[std::size_t(co)];
    for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
            for (int kz = 0; kz < 2; ++kz)
                for (int ky = 0; ky < 2; ++ky)
                    for (int kx = 0; kx < 2; ++kx) {
                        const double wv = w->value[w_idx(ci, co, kz, ky, kx)];
                        if (wv == 0.0) continue;
                        for (int z = 0; z < dd; ++z)
                            for (int y = 0; y < hh; ++y)
                                for (int xx = 0; xx < ww; ++xx)
                                    out->value[out_idx(co, 2 * z + kz, 2 * y + ky, 2 * xx + kx)] +=
                                        wv * x->value[in_idx(ci, z, y, xx)];
                    }
    tape.record([x, w, b, out, cin, cout, dd, hh, ww, od, oh, ow, in_idx, out_idx, w_idx] {
        for (int co = 0; co < cout; ++co) {
            double bacc = 0;
            for (std::size_t i = 0; i < std::size_t(od) * oh * ow; ++i)
                bacc += out->grad[std::size_t(co) * std::size_t(od) * oh * ow + i];
            b->grad[std::size_t(co)] += bacc;
        }
        for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
                for (int kz = 0; kz < 2; ++kz)
                    for (int ky = 0; ky < 2; ++ky)
                        for (int kx = 0; kx < 2; ++kx) {
                            const std::size_t wi = w_idx(ci, co, kz, ky, kx);
                            const double wv = w->value[wi];
                            double wacc = 0;
                            for (int z = 0; z < dd; ++z)
                                for (int y = 0; y < hh; ++y)
                                    for (int xx = 0; xx < ww; ++xx) {
                                        const double g = out->grad[out_idx(co, 2 * z + kz, 2 * y + ky, 2 * xx + kx)];
                                        x->grad[in_idx(ci, z, y, xx)] += wv * g;
                                        wacc += x->value[in_idx(ci, z, y, xx)] * g;
                                    }
                            w->grad[wi] += wacc;
                        }
    });
    return out;
}

inline TensorPtr concat_channels(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 4 || b->shape.size() != 4 || a->shape[1] != b->shape[1] ||
        a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3])
        throw ArgumentError("concat_channels: spatial shape mismatch");
    auto out = tape.tensor({a->shape[0] + b->shape[0], a->shape[1], a->shape[2], a->shape[3]});
    std::copy(a->value.begin(), a->value.end(), out->value.begin());
    std::copy(b->value.begin(), b->value.end(), out->value.begin() + std::ptrdiff_t(a->size()));
    tape.record([a, b, out] {
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[a->size() + i];
    });
    return out;
}

// (C, D, H, W) -> (D*H*W, C) view copy
inline TensorPtr flatten_spatial(Tape& tape, const TensorPtr& x) {
    const int c = x->shape[0];
    const int n = x->shape[1] * x->shape[2] * x->shape[3];
    auto out = tape.tensor({n, c});
    for (int ci = 0; ci < c; ++ci)
        for (int v = 0; v < n; ++v)
            out->value[std::size_t(v) * c + ci] = x->value[std::size_t(ci) * n + v];
    tape.record([x, out, c, n] {
        for (int ci = 0; ci < c; ++ci)
            for (int v = 0; v < n; ++v) x->grad[std::size_t(ci) * n + v] += out->grad[std::size_t(v) * c + ci];
    });
    return out;
}

inline TensorPtr unflatten_spatial(Tape& tape, const TensorPtr& x, const std::vector<int>& spatial_shape) {
    const int c = x->shape[1];
    const int n = x->shape[0];
    if (n != spatial_shape[0] * spatial_shape[1] * spatial_shape[2])
        throw ArgumentError("unflatten_spatial: size mismatch");
    auto out = tape.tensor({c, spatial_shape[0], spatial_shape[1], spatial_shape[2]});
    for (int ci = 0; ci < c; ++ci)
        for (int v = 0; v < n; ++v)
            out->value[std::size_t(ci) * n + v] = x->value[std::size_t(v) * c + ci];
    tape.record([x, out, c, n] {
        for (int ci = 0; ci < c; ++ci)
            for (int v = 0; v < n; ++v) x->grad[std::size_t(v) * c + ci] += out->grad[std::size_t(ci) * n + v];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Linear resampling ops with exact adjoints (used by the forward-consistency
// loss): separable Gaussian blur and trilinear grid resampling on (C,D,H,W).
// ---------------------------------------------------------------------------

inline std::vector<double> gaussian_kernel_values(double sigma) {
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

inline TensorPtr gaussian_blur_op(Tape& tape, const TensorPtr& x, const std::array<double, 3>& sigma_vox) {
    auto cur = x;
    const int dims[3] = {x->shape[1], x->shape[2], x->shape[3]};
    for (int axis = 0; axis < 3; ++axis) {
        if (sigma_vox[std::size_t(axis)] <= 1e-9) continue;
        const auto kernel = std::make_shared<std::vector<double>>(gaussian_kernel_values(sigma_vox[std::size_t(axis)]));
        const int radius = int(kernel->size() / 2);
        auto out = tape.tensor(cur->shape);
        const int c = cur->shape[0];
        const int n = dims[axis];
        auto idx = [=](int ci, int z, int y, int xx) {
            return ((std::size_t(ci) * dims[0] + z) * std::size_t(dims[1]) + y) * std::size_t(dims[2]) + xx;
        };
        for (int ci = 0; ci < c; ++ci)
            for (int z = 0; z < dims[0]; ++z)
                for (int y = 0; y < dims[1]; ++y)
                    for (int xx = 0; xx < dims[2]; ++xx) {
                        int pos[3] = {z, y, xx};
                        double acc = 0, wsum = 0;
                        const int center = pos[axis];
                        for (int t = -radius; t <= radius; ++t) {
                            const int p = center + t;
                            if (p < 0 || p >= n) continue;
                            pos[axis] = p;
                            const double wv = (*kernel)[std::size_t(t + radius)];
                            acc += wv * cur->value[idx(ci, pos[0], pos[1], pos[2])];
                            wsum += wv;
                        }
                        pos[axis] = center;
                        out->value[idx(ci, pos[0], pos[1], pos[2])] = acc / wsum;
                    }
        auto prev = cur;
        tape.record([prev, out, kernel, radius, axis, c, n, dims, idx] {
            for (int ci = 0; ci < c; ++ci)
                for (int z = 0; z < dims[0]; ++z)
                    for (int y = 0; y < dims[1]; ++y)
                        for (int xx = 0; xx < dims[2]; ++xx) {
                            int pos[3] = {z, y, xx};
                            const int center = pos[axis];
                            double wsum = 0;
                            for (int t = -radius; t <= radius; ++t) {
                                const int p = center + t;
                                if (p < 0 || p >= n) continue;
                                wsum += (*kernel)[std::size_t(t + radius)];
                            }
                            const double g = out->grad[idx(ci, z, y, xx)] / wsum;
                            for (int t = -radius; t <= radius; ++t) {
                                const int p = center + t;
                                if (p < 0 || p >= n) continue;
                                pos[axis] = p;
                                prev->grad[idx(ci, pos[0], pos[1], pos[2])] += (*kernel)[std::size_t(t + radius)] * g;
                            }
                            pos[axis] = center;
                        }
        });
        cur = out;
    }
    return cur;
}

// Trilinear resample between grids covering the same FOV (half-voxel
// convention), channels preserved; the adjoint scatters with the same
// interpolation weights.
inline TensorPtr resample_op(Tape& tape, const TensorPtr& x, const std::array<int, 3>& to_dims) {
    const int c = x->shape[0];
    const int fd[3] = {x->shape[1], x->shape[2], x->shape[3]};
    const int td[3] = {to_dims[0], to_dims[1], to_dims[2]};
    auto out = tape.tensor({c, td[0], td[1], td[2]});
    const std::size_t fplane = std::size_t(fd[0]) * fd[1] * fd[2];
    const std::size_t tplane = std::size_t(td[0]) * td[1] * td[2];

    struct Tap {
        std::size_t src;
        double w;
    };
    auto taps = std::make_shared<std::vector<std::array<Tap, 8>>>(tplane);
    std::size_t ti = 0;
    for (int z = 0; z < td[0]; ++z)
        for (int y = 0; y < td[1]; ++y)
            for (int xx = 0; xx < td[2]; ++xx, ++ti) {
                const double fz = std::clamp((z + 0.5) * fd[0] / td[0] - 0.5, 0.0, double(fd[0] - 1));
                const double fy = std::clamp((y + 0.5) * fd[1] / td[1] - 0.5, 0.0, double(fd[1] - 1));
                const double fx = std::clamp((xx + 0.5) * fd[2] / td[2] - 0.5, 0.0, double(fd[2] - 1));
                const int z0 = int(fz), y0 = int(fy), x0 = int(fx);
                const int z1 = std::min(z0 + 1, fd[0] - 1), y1 = std::min(y0 + 1, fd[1] - 1),
                          x1 = std::min(x0 + 1, fd[2] - 1);
                const double tz = fz - z0, ty = fy - y0, tx = fx - x0;
                int k = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx, ++k) {
                            const int zz = dz ? z1 : z0, yy = dy ? y1 : y0, xc = dx ? x1 : x0;
                            (*taps)[ti][std::size_t(k)] = {
                                (std::size_t(zz) * fd[1] + yy) * std::size_t(fd[2]) + xc,
                                (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx)};
                        }
            }
    for (int ci = 0; ci < c; ++ci) {
        const double* xv = x->value.data() + std::size_t(ci) * fplane;
        double* ov = out->value.data() + std::size_t(ci) * tplane;
        for (std::size_t i = 0; i < tplane; ++i) {
            double s = 0;
            for (const auto& t : (*taps)[i]) s += t.w * xv[t.src];
            ov[i] = s;
        }
    }
    tape.record([x, out, taps, c, fplane, tplane] {
        for (int ci = 0; ci < c; ++ci) {
            double* xg = x->grad.data() + std::size_t(ci) * fplane;
            const double* og = out->grad.data() + std::size_t(ci) * tplane;
            for (std::size_t i = 0; i < tplane; ++i)
                for (const auto& t : (*taps)[i]) xg[t.src] += t.w * og[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Scalar loss helpers
// ---------------------------------------------------------------------------

inline TensorPtr mse_loss(Tape& tape, const TensorPtr& a, const TensorPtr& target) {
    if (a->shape != target->shape) throw ArgumentError("mse_loss: shape mismatch");
    auto out = tape.tensor({1});
    double s = 0;
    for (std::size_t i = 0; i < a->size(); ++i) {
        const double d = a->value[i] - target->value[i];
        s += d * d;
    }
    out->value[0] = s / double(a->size());
    tape.record([a, target, out] {
        const double g = out->grad[0] * 2.0 / double(a->size());
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += g * (a->value[i] - target->value[i]);
    });
    return out;
}

inline TensorPtr sum_scaled(Tape& tape, const std::vector<TensorPtr>& scalars,
                            const std::vector<double>& weights) {
    if (scalars.size() != weights.size()) throw ArgumentError("sum_scaled: size mismatch");
    auto out = tape.tensor({1});
    for (std::size_t k = 0; k < scalars.size(); ++k) out->value[0] += weights[k] * scalars[k]->value[0];
    tape.record([scalars, weights, out] {
        for (std::size_t k = 0; k < scalars.size(); ++k) scalars[k]->grad[0] += weights[k] * out->grad[0];
    });
    return out;
}

}  // namespace dtisr::ad
