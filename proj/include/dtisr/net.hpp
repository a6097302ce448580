#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dtisr/autodiff.hpp"
#include "dtisr/core.hpp"
#include "dtisr/degrade.hpp"
#include "dtisr/icosphere.hpp"
#include "dtisr/sh.hpp"
#include "dtisr/shsample.hpp"
#include "dtisr/tensor.hpp"
#include "dtisr/volume.hpp"

#include "json.hpp"

namespace dtisr {

// ---------------------------------------------------------------------------
// Spatio-angular superresolution network: icosphere graph-convolution blocks
// flanking a small 3-D U-Net with a global-token attention bottleneck, all
// built on the reverse-mode tape in autodiff.hpp.
// ---------------------------------------------------------------------------

struct MiniUNetConfig {
    int levels = 2;          // paper-scale: 4
    int base_features = 16;  // paper-scale: 128
    int global_tokens = 8;
    int ico_hidden = 8;  // feature width inside the graph-conv layers
    bool residual = true;
    // Layer norm inside the graph-conv layers standardizes the amplitude
    // features and with it the per-voxel isotropic level; at desk scale the
    // network trains far better with the normalization stage bypassed, so
    // trained configurations default to off (the operator itself supports
    // it and is exercised with it on).
    bool gc_layer_norm = false;

    int dim_multiple() const { return 1 << levels; }
};

inline void to_json(nlohmann::json& j, const MiniUNetConfig& c) {
    j = nlohmann::json{{"levels", c.levels},
                       {"base_features", c.base_features},
                       {"global_tokens", c.global_tokens},
                       {"ico_hidden", c.ico_hidden},
                       {"residual", c.residual},
                       {"gc_layer_norm", c.gc_layer_norm}};
}

inline void from_json(const nlohmann::json& j, MiniUNetConfig& c) {
    MiniUNetConfig d;
    c.levels = j.value("levels", d.levels);
    c.base_features = j.value("base_features", d.base_features);
    c.global_tokens = j.value("global_tokens", d.global_tokens);
    c.ico_hidden = j.value("ico_hidden", d.ico_hidden);
    c.residual = j.value("residual", d.residual);
    c.gc_layer_norm = j.value("gc_layer_norm", d.gc_layer_norm);
}

struct LossWeights {
    double lowb_l2 = 5.0;
    double l2order_l1 = 10.0;
    double angular = 1.0;
    double consistency = 2.5;
    int fibonacci_count = 256;
    double temperature = 0.05;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = nlohmann::json{{"lowb_l2", w.lowb_l2},
                       {"l2order_l1", w.l2order_l1},
                       {"angular", w.angular},
                       {"consistency", w.consistency},
                       {"fibonacci_count", w.fibonacci_count},
                       {"temperature", w.temperature}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
    LossWeights d;
    w.lowb_l2 = j.value("lowb_l2", d.lowb_l2);
    w.l2order_l1 = j.value("l2order_l1", d.l2order_l1);
    w.angular = j.value("angular", d.angular);
    w.consistency = j.value("consistency", d.consistency);
    w.fibonacci_count = j.value("fibonacci_count", d.fibonacci_count);
    w.temperature = j.value("temperature", d.temperature);
}

// ---------------------------------------------------------------------------
// Parameter registry (declaration order defines the checkpoint layout)
// ---------------------------------------------------------------------------

class ParamStore {
  public:
    ad::TensorPtr add(const std::vector<int>& shape) {
        auto t = ad::make_tensor(shape, true);
        params_.push_back(t);
        return t;
    }

    const std::vector<ad::TensorPtr>& params() const { return params_; }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->size();
        return n;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(total_size());
        for (const auto& p : params_) out.insert(out.end(), p->value.begin(), p->value.end());
        return out;
    }

    void load_flat(const std::vector<double>& flat) {
        if (flat.size() != total_size()) throw ArgumentError("ParamStore: flat size mismatch");
        std::size_t off = 0;
        for (auto& p : params_) {
            std::copy(flat.begin() + std::ptrdiff_t(off), flat.begin() + std::ptrdiff_t(off + p->size()),
                      p->value.begin());
            off += p->size();
        }
    }

    std::vector<double> flatten_grad() const {
        std::vector<double> out;
        out.reserve(total_size());
        for (const auto& p : params_) out.insert(out.end(), p->grad.begin(), p->grad.end());
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

  private:
    std::vector<ad::TensorPtr> params_;
};

// ---------------------------------------------------------------------------
// Graph convolution on icosphere amplitude features (Eq.-style operator:
// GELU(LN{(wv I + wn/|KNN| A) (H W) + 1 b'})).
// ---------------------------------------------------------------------------

struct GraphConvLayer {
    ad::TensorPtr w;   // (fin, fout)
    ad::TensorPtr b;   // (fout)
    ad::TensorPtr wv;  // scalar
    ad::TensorPtr wn;  // scalar
    ad::TensorPtr ln_gain, ln_bias;  // (fout)
    bool use_layer_norm = true;
    bool use_activation = true;
    int fin = 0, fout = 0;

    static GraphConvLayer create(ParamStore& store, int fin, int fout, Rng& rng) {
        GraphConvLayer l;
        l.fin = fin;
        l.fout = fout;
        l.w = store.add({fin, fout});
        const double s = std::sqrt(2.0 / fin);
        for (auto& v : l.w->value) v = rng.normal(0.0, s);
        l.b = store.add({fout});
        l.wv = store.add({1});
        l.wv->value[0] = 1.0;
        l.wn = store.add({1});
        l.wn->value[0] = 0.5;
        l.ln_gain = store.add({fout});
        std::fill(l.ln_gain->value.begin(), l.ln_gain->value.end(), 1.0);
        l.ln_bias = store.add({fout});
        return l;
    }

    // identity configuration used by tests: W=I, b=0, wv=1, wn=0, LN and
    // activation bypassed
    void make_passthrough() {
        if (fin != fout) throw ArgumentError("passthrough needs fin == fout");
        std::fill(w->value.begin(), w->value.end(), 0.0);
        for (int i = 0; i < fin; ++i) w->value[std::size_t(i) * fout + std::size_t(i)] = 1.0;
        std::fill(b->value.begin(), b->value.end(), 0.0);
        wv->value[0] = 1.0;
        wn->value[0] = 0.0;
        use_layer_norm = false;
        use_activation = false;
    }
};

namespace net_detail {

// out[v,a,f] = wv x[v,a,f] + (wn/K) sum_nb x[v,nb,f]
inline ad::TensorPtr vertex_mix(ad::Tape& tape, const ad::TensorPtr& x, const ad::TensorPtr& wv,
                                const ad::TensorPtr& wn, const Icosphere& sphere) {
    const int v_count = x->shape[0];
    const int nv = x->shape[1];
    const int f = x->shape[2];
    if (nv != Icosphere::kVertexCount) throw ArgumentError("vertex_mix: expected 42 vertices");
    auto out = tape.tensor(x->shape);
    const double a = wv->value[0];
    const double bscale = wn->value[0] / Icosphere::kNeighbors;
    for (int vv = 0; vv < v_count; ++vv)
        for (int vert = 0; vert < nv; ++vert) {
            const std::size_t obase = (std::size_t(vv) * nv + vert) * std::size_t(f);
            for (int ff = 0; ff < f; ++ff) out->value[obase + std::size_t(ff)] = a * x->value[obase + std::size_t(ff)];
            for (int nb : sphere.knn[std::size_t(vert)]) {
                const std::size_t nbase = (std::size_t(vv) * nv + nb) * std::size_t(f);
                for (int ff = 0; ff < f; ++ff)
                    out->value[obase + std::size_t(ff)] += bscale * x->value[nbase + std::size_t(ff)];
            }
        }
    const Icosphere* sp = &sphere;
    tape.record([x, wv, wn, out, v_count, nv, f, sp] {
        const double a = wv->value[0];
        const double bscale = wn->value[0] / Icosphere::kNeighbors;
        double dwv = 0, dwn = 0;
        for (int vv = 0; vv < v_count; ++vv)
            for (int vert = 0; vert < nv; ++vert) {
                const std::size_t obase = (std::size_t(vv) * nv + vert) * std::size_t(f);
                for (int ff = 0; ff < f; ++ff) {
                    const double g = out->grad[obase + std::size_t(ff)];
                    if (g == 0.0) continue;
                    x->grad[obase + std::size_t(ff)] += a * g;
                    dwv += x->value[obase + std::size_t(ff)] * g;
                    for (int nb : sp->knn[std::size_t(vert)]) {
                        const std::size_t nbi = (std::size_t(vv) * nv + nb) * std::size_t(f) + std::size_t(ff);
                        x->grad[nbi] += bscale * g;
                        dwn += x->value[nbi] * g / Icosphere::kNeighbors;
                    }
                }
            }
        wv->grad[0] += dwv;
        wn->grad[0] += dwn;
    });
    return out;
}

inline ad::TensorPtr reshape(ad::Tape& tape, const ad::TensorPtr& x, const std::vector<int>& shape) {
    if (ad::shape_size(shape) != x->size()) throw ArgumentError("reshape: size mismatch");
    auto out = tape.tensor(shape);
    out->value = x->value;
    tape.record([x, out] {
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
    });
    return out;
}

inline ad::TensorPtr slice_cols(ad::Tape& tape, const ad::TensorPtr& x, int start, int count) {
    const int cols = x->shape.back();
    const std::size_t rows = x->size() / std::size_t(cols);
    auto out = tape.tensor({int(rows), count});
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < count; ++c)
            out->value[r * std::size_t(count) + std::size_t(c)] = x->value[r * std::size_t(cols) + std::size_t(start + c)];
    tape.record([x, out, cols, rows, start, count] {
        for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < count; ++c)
                x->grad[r * std::size_t(cols) + std::size_t(start + c)] += out->grad[r * std::size_t(count) + std::size_t(c)];
    });
    return out;
}

inline ad::TensorPtr concat_cols(ad::Tape& tape, const ad::TensorPtr& a, const ad::TensorPtr& b) {
    const int ca = a->shape.back(), cb = b->shape.back();
    const std::size_t rows = a->size() / std::size_t(ca);
    if (b->size() / std::size_t(cb) != rows) throw ArgumentError("concat_cols: row mismatch");
    auto out = tape.tensor({int(rows), ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
        for (int c = 0; c < ca; ++c)
            out->value[r * std::size_t(ca + cb) + std::size_t(c)] = a->value[r * std::size_t(ca) + std::size_t(c)];
        for (int c = 0; c < cb; ++c)
            out->value[r * std::size_t(ca + cb) + std::size_t(ca + c)] = b->value[r * std::size_t(cb) + std::size_t(c)];
    }
    tape.record([a, b, out, ca, cb, rows] {
        for (std::size_t r = 0; r < rows; ++r) {
            for (int c = 0; c < ca; ++c)
                a->grad[r * std::size_t(ca) + std::size_t(c)] += out->grad[r * std::size_t(ca + cb) + std::size_t(c)];
            for (int c = 0; c < cb; ++c)
                b->grad[r * std::size_t(cb) + std::size_t(c)] += out->grad[r * std::size_t(ca + cb) + std::size_t(ca + c)];
        }
    });
    return out;
}

}  // namespace net_detail

// h: (V, 42, fin) amplitude features per voxel. Layer norm standardizes
// across the 42 vertices per feature: normalizing along the feature axis
// would be degenerate for single-feature layers and would erase the
// amplitude pattern this block exists to filter.
inline ad::TensorPtr graph_conv_forward(ad::Tape& tape, const GraphConvLayer& layer, const ad::TensorPtr& h,
                                        const Icosphere& sphere) {
    const int v_count = h->shape[0];
    auto flat = net_detail::reshape(tape, h, {v_count * Icosphere::kVertexCount, layer.fin});
    auto transformed = ad::matmul(tape, flat, layer.w);
    auto cube = net_detail::reshape(tape, transformed, {v_count, Icosphere::kVertexCount, layer.fout});
    auto mixed = net_detail::vertex_mix(tape, cube, layer.wv, layer.wn, sphere);
    auto flat_mixed = net_detail::reshape(tape, mixed, {v_count * Icosphere::kVertexCount, layer.fout});
    auto biased = ad::add_row_broadcast(tape, flat_mixed, layer.b);
    auto cube_biased = net_detail::reshape(tape, biased, {v_count, Icosphere::kVertexCount, layer.fout});
    auto normed = layer.use_layer_norm
                      ? ad::layer_norm_mid(tape, cube_biased, layer.ln_gain, layer.ln_bias)
                      : cube_biased;
    auto activated = layer.use_activation ? ad::gelu(tape, normed) : normed;
    return net_detail::reshape(tape, activated, {v_count, Icosphere::kVertexCount, layer.fout});
}

// ---------------------------------------------------------------------------
// Icosphere projection/deprojection block: project SH channels onto the 42
// vertices, run two graph-conv layers, deproject with the Moore-Penrose
// pseudo-inverse.
// ---------------------------------------------------------------------------

struct IcoBlock {
    GraphConvLayer layer1;  // 1 -> hidden
    GraphConvLayer layer2;  // hidden -> 1
    ad::TensorPtr projection;    // (6, 42), constant
    ad::TensorPtr deprojection;  // (42, 6), constant: transpose of pinv(P^T)

    static IcoBlock create(ParamStore& store, int hidden, Rng& rng) {
        IcoBlock blk;
        blk.layer1 = GraphConvLayer::create(store, 1, hidden, rng);
        blk.layer2 = GraphConvLayer::create(store, hidden, 1, rng);
        const Icosphere& sphere = shared_icosphere();
        blk.projection = ad::make_tensor({6, Icosphere::kVertexCount});
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < Icosphere::kVertexCount; ++j)
                blk.projection->value[std::size_t(i) * Icosphere::kVertexCount + std::size_t(j)] =
                    sphere.projection(i, j);
        const MatX pinv = icosphere_deprojector(sphere);  // 6 x 42
        blk.deprojection = ad::make_tensor({Icosphere::kVertexCount, 6});
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < Icosphere::kVertexCount; ++j)
                blk.deprojection->value[std::size_t(j) * 6 + std::size_t(i)] = pinv(i, j);
        return blk;
    }

    void make_passthrough() {
        layer1.make_passthrough();
        layer2.make_passthrough();
    }
};

// coeffs: (V, 6) per-voxel SH coefficients -> (V, 6)
inline ad::TensorPtr ico_block_forward(ad::Tape& tape, const IcoBlock& block, const ad::TensorPtr& coeffs) {
    const Icosphere& sphere = shared_icosphere();
    const int v_count = coeffs->shape[0];
    // h = P^T c per voxel: (V,6) x (6,42) -> (V,42)
    auto h = ad::matmul(tape, coeffs, block.projection);
    auto features = net_detail::reshape(tape, h, {v_count, Icosphere::kVertexCount, 1});
    // passthrough layer1 on 1 -> hidden needs fin == fout, so tests use
    // hidden == 1; normal operation widens then collapses
    auto g1 = graph_conv_forward(tape, block.layer1, features, sphere);
    auto g2 = graph_conv_forward(tape, block.layer2, g1, sphere);
    auto h_out = net_detail::reshape(tape, g2, {v_count, Icosphere::kVertexCount});
    return ad::matmul(tape, h_out, block.deprojection);
}

// ---------------------------------------------------------------------------
// Mini U-Net with mean-pool downsampling, transposed-conv upsampling and
// global-token attention at the bottleneck.
// ---------------------------------------------------------------------------

struct ConvLayer {
    ad::TensorPtr w, b;

    static ConvLayer create(ParamStore& store, int cin, int cout, Rng& rng, double init_scale = 1.0) {
        ConvLayer l;
        l.w = store.add({cout, cin, 3, 3, 3});
        const double s = init_scale * std::sqrt(2.0 / (27.0 * cin));
        for (auto& v : l.w->value) v = rng.normal(0.0, s);
        l.b = store.add({cout});
        return l;
    }
};

struct TconvLayer {
    ad::TensorPtr w, b;

    static TconvLayer create(ParamStore& store, int cin, int cout, Rng& rng) {
        TconvLayer l;
        l.w = store.add({cin, cout, 2, 2, 2});
        const double s = std::sqrt(2.0 / (8.0 * cin));
        for (auto& v : l.w->value) v = rng.normal(0.0, s);
        l.b = store.add({cout});
        return l;
    }
};

struct AttentionBlock {
    ad::TensorPtr tokens;          // (T, C)
    ad::TensorPtr wq, wk, wv, wo;  // (C, C)
    int token_count = 8;

    static AttentionBlock create(ParamStore& store, int tokens, int channels, Rng& rng) {
        AttentionBlock a;
        a.token_count = tokens;
        a.tokens = store.add({tokens, channels});
        for (auto& v : a.tokens->value) v = rng.normal(0.0, 0.02);
        const double s = std::sqrt(1.0 / channels);
        for (auto* m : {&a.wq, &a.wk, &a.wv, &a.wo}) {
            *m = store.add({channels, channels});
            for (auto& v : (*m)->value) v = rng.normal(0.0, s);
        }
        return a;
    }
};

// Tokens query the bottleneck voxels; the mean token summary is projected
// and broadcast-added back onto every voxel.
inline ad::TensorPtr attention_forward(ad::Tape& tape, const AttentionBlock& attn, const ad::TensorPtr& x) {
    const int c = x->shape[0];
    const std::vector<int> spatial{x->shape[1], x->shape[2], x->shape[3]};
    auto xv = ad::flatten_spatial(tape, x);  // (N, C)
    auto q = ad::matmul(tape, attn.tokens, attn.wq);   // (T, C)
    auto k = ad::matmul(tape, xv, attn.wk);            // (N, C)
    auto v = ad::matmul(tape, xv, attn.wv);            // (N, C)
    auto logits = ad::scale(tape, ad::matmul(tape, q, k, /*transpose_b=*/true), 1.0 / std::sqrt(double(c)));
    auto weights = ad::softmax_rows(tape, logits);     // (T, N)
    auto summary = ad::matmul(tape, weights, v);       // (T, C)
    auto pooled = ad::mean_rows(tape, summary);        // (C)
    auto pooled_row = net_detail::reshape(tape, pooled, {1, c});
    auto projected = ad::matmul(tape, pooled_row, attn.wo);  // (1, C)
    auto projected_vec = net_detail::reshape(tape, projected, {c});
    auto out_flat = ad::add_row_broadcast(tape, xv, projected_vec);
    return ad::unflatten_spatial(tape, out_flat, spatial);
}

struct MiniUNet {
    MiniUNetConfig config;
    std::vector<std::array<ConvLayer, 2>> encoder;
    std::array<ConvLayer, 2> bottleneck_convs;
    AttentionBlock attention;
    std::vector<TconvLayer> up;
    std::vector<std::array<ConvLayer, 2>> decoder;
    ConvLayer final_conv;

    static MiniUNet create(ParamStore& store, const MiniUNetConfig& cfg, Rng& rng) {
        MiniUNet net;
        net.config = cfg;
        int ch = ShSample::kChannels;
        for (int l = 0; l < cfg.levels; ++l) {
            const int f = cfg.base_features << l;
            net.encoder.push_back({ConvLayer::create(store, ch, f, rng), ConvLayer::create(store, f, f, rng)});
            ch = f;
        }
        const int fb = cfg.base_features << cfg.levels;
        net.bottleneck_convs = {ConvLayer::create(store, ch, fb, rng), ConvLayer::create(store, fb, fb, rng)};
        net.attention = AttentionBlock::create(store, cfg.global_tokens, fb, rng);
        int above = fb;
        for (int l = cfg.levels - 1; l >= 0; --l) {
            const int f = cfg.base_features << l;
            net.up.push_back(TconvLayer::create(store, above, f, rng));
            net.decoder.push_back(
                {ConvLayer::create(store, 2 * f, f, rng), ConvLayer::create(store, f, f, rng)});
            above = f;
        }
        // zero-initialized head: the network starts as the zero map
        net.final_conv = ConvLayer::create(store, cfg.base_features, ShSample::kChannels, rng, 0.0);
        return net;
    }
};

inline ad::TensorPtr mini_unet_forward(ad::Tape& tape, const MiniUNet& net, const ad::TensorPtr& input) {
    const int mult = net.config.dim_multiple();
    for (int a = 1; a <= 3; ++a)
        if (input->shape[std::size_t(a)] % mult != 0)
            throw ArgumentError("mini_unet_forward: spatial dims must be divisible by " + std::to_string(mult));
    auto x = input;
    std::vector<ad::TensorPtr> skips;
    for (int l = 0; l < net.config.levels; ++l) {
        x = ad::gelu(tape, ad::conv3d(tape, x, net.encoder[std::size_t(l)][0].w, net.encoder[std::size_t(l)][0].b));
        x = ad::gelu(tape, ad::conv3d(tape, x, net.encoder[std::size_t(l)][1].w, net.encoder[std::size_t(l)][1].b));
        skips.push_back(x);
        x = ad::mean_pool2(tape, x);
    }
    x = ad::gelu(tape, ad::conv3d(tape, x, net.bottleneck_convs[0].w, net.bottleneck_convs[0].b));
    x = attention_forward(tape, net.attention, x);
    x = ad::gelu(tape, ad::conv3d(tape, x, net.bottleneck_convs[1].w, net.bottleneck_convs[1].b));
    for (int i = 0; i < net.config.levels; ++i) {
        const int l = net.config.levels - 1 - i;
        x = ad::transposed_conv2(tape, x, net.up[std::size_t(i)].w, net.up[std::size_t(i)].b);
        x = ad::concat_channels(tape, x, skips[std::size_t(l)]);
        x = ad::gelu(tape, ad::conv3d(tape, x, net.decoder[std::size_t(i)][0].w, net.decoder[std::size_t(i)][0].b));
        x = ad::gelu(tape, ad::conv3d(tape, x, net.decoder[std::size_t(i)][1].w, net.decoder[std::size_t(i)][1].b));
    }
    return ad::conv3d(tape, x, net.final_conv.w, net.final_conv.b);
}

// ---------------------------------------------------------------------------
// Full model: ico-block -> U-Net -> ico-block (+ global residual). The low-b
// channel bypasses the ico blocks; only the six SH channels are projected.
// ---------------------------------------------------------------------------

struct SrModel {
    MiniUNetConfig config;
    std::shared_ptr<ParamStore> store;
    IcoBlock ico_in, ico_out;
    MiniUNet unet;
    std::uint64_t init_seed = 0;

    static SrModel create(const MiniUNetConfig& cfg, std::uint64_t seed) {
        SrModel m;
        m.config = cfg;
        m.init_seed = seed;
        m.store = std::make_shared<ParamStore>();
        Rng rng(seed ^ 0x5bf03635f0935ad1ULL);
        m.ico_in = IcoBlock::create(*m.store, cfg.ico_hidden, rng);
        m.ico_out = IcoBlock::create(*m.store, cfg.ico_hidden, rng);
        for (auto* layer : {&m.ico_in.layer1, &m.ico_in.layer2, &m.ico_out.layer1, &m.ico_out.layer2})
            layer->use_layer_norm = cfg.gc_layer_norm;
        m.unet = MiniUNet::create(*m.store, cfg, rng);
        return m;
    }
};

namespace net_detail {

inline ad::TensorPtr ico_stage(ad::Tape& tape, const IcoBlock& block, const ad::TensorPtr& field) {
    const std::vector<int> spatial{field->shape[1], field->shape[2], field->shape[3]};
    auto flat = ad::flatten_spatial(tape, field);         // (N, 7)
    auto lowb = slice_cols(tape, flat, 0, 1);             // (N, 1)
    auto coeffs = slice_cols(tape, flat, 1, 6);           // (N, 6)
    auto filtered = ico_block_forward(tape, block, coeffs);
    auto joined = concat_cols(tape, lowb, filtered);      // (N, 7)
    return ad::unflatten_spatial(tape, joined, spatial);
}

}  // namespace net_detail

inline ad::TensorPtr sr_forward(ad::Tape& tape, const SrModel& model, const ad::TensorPtr& input) {
    auto x = net_detail::ico_stage(tape, model.ico_in, input);
    x = mini_unet_forward(tape, model.unet, x);
    x = net_detail::ico_stage(tape, model.ico_out, x);
    if (model.config.residual) x = ad::add(tape, x, input);
    return x;
}

// ---------------------------------------------------------------------------
// Soft-argmax principal direction: evaluate the SH function over a Fibonacci
// direction set, softmax-weight the axial outer products, take the principal
// axis of the weighted sum.
// ---------------------------------------------------------------------------

inline Vec3 soft_argmax_direction(const ShCoeffs& coeffs, const std::vector<Vec3>& directions,
                                  double temperature) {
    if (directions.size() < 64) throw ArgumentError("soft_argmax_direction: needs >= 64 directions");
    if (!(temperature > 0)) throw ArgumentError("soft_argmax_direction: temperature must be > 0");
    std::vector<double> s(directions.size());
    double mx = -1e300;
    for (std::size_t d = 0; d < directions.size(); ++d) {
        s[d] = eval_sh(coeffs, directions[d]);
        mx = std::max(mx, s[d]);
    }
    double sum = 0;
    for (auto& v : s) {
        v = std::exp((v - mx) / temperature);
        sum += v;
    }
    Mat3 m{};
    for (std::size_t d = 0; d < directions.size(); ++d) {
        const double w = s[d] / sum;
        for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q) m[std::size_t(p)][std::size_t(q)] += w * directions[d][std::size_t(p)] * directions[d][std::size_t(q)];
    }
    const SymEigen3 eig = sym_eigen3(m);
    return canonical_sign(normalized(eig.vectors[0]));
}

// ---------------------------------------------------------------------------
// Composite training loss. Channel semantics: L2 over (low-b, l=0) summed
// over the two channels and averaged over voxels; L1 over the five l=2
// channels likewise; an anisotropy-weighted squared angular error between
// soft-argmax directions; and a forward-consistency MSE against the LR input
// after re-degrading the prediction with the iteration's blur/resample.
// ---------------------------------------------------------------------------

struct DegradeSettings {
    std::array<double, 3> blur_sigma_vox{0, 0, 0};
    std::array<int, 3> low_dims{0, 0, 0};  // 0 means "no resampling"

    static DegradeSettings for_resolution(const VolumeGrid& grid, double target_mm) {
        DegradeSettings s;
        for (int a = 0; a < 3; ++a) {
            const double src = grid.voxel_size[std::size_t(a)];
            if (target_mm > src * (1 + 1e-9)) {
                const double fwhm = target_mm * std::sqrt(1.0 - (src / target_mm) * (src / target_mm));
                s.blur_sigma_vox[std::size_t(a)] = fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0))) / src;
                const double fov = src * grid.dims[std::size_t(a)];
                s.low_dims[std::size_t(a)] = std::max(1, int(std::llround(fov / target_mm)));
            }
        }
        return s;
    }

    bool active() const { return low_dims[0] > 0 || blur_sigma_vox[0] > 0; }
};

namespace net_detail {

// weighted squared axial angular error against fixed target directions
inline ad::TensorPtr angular_loss_op(ad::Tape& tape, const ad::TensorPtr& pred,
                                     const std::shared_ptr<std::vector<Vec3>>& target_dirs,
                                     const std::shared_ptr<std::vector<double>>& voxel_weights,
                                     const std::shared_ptr<std::vector<Vec3>>& fib_dirs,
                                     const std::shared_ptr<std::vector<std::array<double, 6>>>& fib_basis,
                                     double temperature) {
    const std::size_t n = std::size_t(pred->shape[1]) * std::size_t(pred->shape[2]) * std::size_t(pred->shape[3]);
    auto out = tape.tensor({1});

    struct VoxelState {
        std::vector<double> weights;  // softmax weights over directions
        SymEigen3 eig;
        double dtheta2_dcos = 0;
        double cos_sign = 1;
        double theta = 0;
    };
    auto states = std::make_shared<std::vector<VoxelState>>();
    states->reserve(n);

    double total = 0;
    const std::size_t ndir = fib_dirs->size();
    for (std::size_t v = 0; v < n; ++v) {
        VoxelState st;
        const double wvox = (*voxel_weights)[v];
        if (wvox <= 0.0) {
            states->push_back(std::move(st));
            continue;
        }
        std::vector<double> s(ndir);
        double mx = -1e300;
        for (std::size_t d = 0; d < ndir; ++d) {
            double acc = 0;
            for (int i = 0; i < 6; ++i)
                acc += pred->value[std::size_t(i + 1) * n + v] * (*fib_basis)[d][std::size_t(i)];
            s[d] = acc;
            mx = std::max(mx, acc);
        }
        double sum = 0;
        for (auto& x : s) {
            x = std::exp((x - mx) / temperature);
            sum += x;
        }
        Mat3 m{};
        for (std::size_t d = 0; d < ndir; ++d) {
            s[d] /= sum;
            const Vec3& u = (*fib_dirs)[d];
            for (int p = 0; p < 3; ++p)
                for (int q = 0; q < 3; ++q) m[std::size_t(p)][std::size_t(q)] += s[d] * u[std::size_t(p)] * u[std::size_t(q)];
        }
        st.eig = sym_eigen3(m);
        st.weights = std::move(s);
        const Vec3& t = (*target_dirs)[v];
        const double co = dot(st.eig.vectors[0], t);
        st.cos_sign = co < 0 ? -1.0 : 1.0;
        const double a = std::min(1.0, std::abs(co));
        st.theta = std::acos(a);
        total += wvox * st.theta * st.theta;
        st.dtheta2_dcos = a > 1.0 - 1e-9 ? -2.0 : -2.0 * st.theta / std::sqrt(1.0 - a * a);
        states->push_back(std::move(st));
    }
    out->value[0] = total / double(n);

    tape.record([pred, target_dirs, voxel_weights, fib_dirs, fib_basis, states, out, n, ndir, temperature] {
        const double gout = out->grad[0] / double(n);
        for (std::size_t v = 0; v < n; ++v) {
            const double wvox = (*voxel_weights)[v];
            if (wvox <= 0.0) continue;
            const VoxelState& st = (*states)[v];
            const Vec3& t = (*target_dirs)[v];
            // d loss / d v1
            const Vec3 dv1 = (gout * wvox * st.dtheta2_dcos * st.cos_sign) * t;
            // eigenvector adjoint -> dM (contracted directly with u u')
            std::array<double, 2> wj{};
            for (int j = 1; j < 3; ++j) {
                double gap = st.eig.values[0] - st.eig.values[std::size_t(j)];
                gap += std::copysign(1e-9, gap == 0.0 ? 1.0 : gap);
                wj[std::size_t(j - 1)] = dot(dv1, st.eig.vectors[std::size_t(j)]) / gap;
            }
            // dw_d = u' G u with G = sum_j wj (vj v1'); then softmax backward
            std::vector<double> dw(ndir);
            double mean_dw = 0;
            for (std::size_t d = 0; d < ndir; ++d) {
                const Vec3& u = (*fib_dirs)[d];
                const double uv1 = dot(u, st.eig.vectors[0]);
                dw[d] = wj[0] * dot(u, st.eig.vectors[1]) * uv1 + wj[1] * dot(u, st.eig.vectors[2]) * uv1;
                mean_dw += dw[d] * st.weights[d];
            }
            for (std::size_t d = 0; d < ndir; ++d) {
                const double ds = st.weights[d] * (dw[d] - mean_dw) / temperature;
                if (ds == 0.0) continue;
                for (int i = 0; i < 6; ++i)
                    pred->grad[std::size_t(i + 1) * n + v] += ds * (*fib_basis)[d][std::size_t(i)];
            }
        }
    });
    return out;
}

// channel-range losses: summed over the channel range, averaged over voxels
inline ad::TensorPtr channel_l2(ad::Tape& tape, const ad::TensorPtr& pred, const ad::TensorPtr& target,
                                int c0, int c1) {
    const std::size_t n = std::size_t(pred->shape[1]) * std::size_t(pred->shape[2]) * std::size_t(pred->shape[3]);
    auto out = tape.tensor({1});
    double total = 0;
    for (int c = c0; c < c1; ++c)
        for (std::size_t v = 0; v < n; ++v) {
            const double d = pred->value[std::size_t(c) * n + v] - target->value[std::size_t(c) * n + v];
            total += d * d;
        }
    out->value[0] = total / double(n);
    tape.record([pred, target, out, c0, c1, n] {
        const double g = out->grad[0] * 2.0 / double(n);
        for (int c = c0; c < c1; ++c)
            for (std::size_t v = 0; v < n; ++v)
                pred->grad[std::size_t(c) * n + v] +=
                    g * (pred->value[std::size_t(c) * n + v] - target->value[std::size_t(c) * n + v]);
    });
    return out;
}

inline ad::TensorPtr channel_l1(ad::Tape& tape, const ad::TensorPtr& pred, const ad::TensorPtr& target,
                                int c0, int c1) {
    const std::size_t n = std::size_t(pred->shape[1]) * std::size_t(pred->shape[2]) * std::size_t(pred->shape[3]);
    auto out = tape.tensor({1});
    double total = 0;
    for (int c = c0; c < c1; ++c)
        for (std::size_t v = 0; v < n; ++v)
            total += std::abs(pred->value[std::size_t(c) * n + v] - target->value[std::size_t(c) * n + v]);
    out->value[0] = total / double(n);
    tape.record([pred, target, out, c0, c1, n] {
        const double g = out->grad[0] / double(n);
        for (int c = c0; c < c1; ++c)
            for (std::size_t v = 0; v < n; ++v) {
                const double d = pred->value[std::size_t(c) * n + v] - target->value[std::size_t(c) * n + v];
                pred->grad[std::size_t(c) * n + v] += g * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0);
            }
    });
    return out;
}

}  // namespace net_detail

struct CompositeLossTerms {
    double total = 0;
    double lowb_l2 = 0;
    double l2order_l1 = 0;
    double angular = 0;
    double consistency = 0;
};

// pred is on the tape; target and lr_input are constants.
inline ad::TensorPtr composite_loss(ad::Tape& tape, const ad::TensorPtr& pred, const ad::TensorPtr& target,
                                    const ad::TensorPtr& lr_input, const DegradeSettings& degrade,
                                    const LossWeights& weights, CompositeLossTerms* terms = nullptr) {
    if (pred->shape != target->shape) throw ArgumentError("composite_loss: shape mismatch");
    const std::size_t n = std::size_t(pred->shape[1]) * std::size_t(pred->shape[2]) * std::size_t(pred->shape[3]);

    auto l2 = net_detail::channel_l2(tape, pred, target, 0, 2);
    auto l1 = net_detail::channel_l1(tape, pred, target, 2, 7);

    // anisotropy-weighted angular term: targets and weights from the target
    auto fib = std::make_shared<std::vector<Vec3>>(fibonacci_sphere(weights.fibonacci_count));
    auto fib_basis = std::make_shared<std::vector<std::array<double, 6>>>();
    fib_basis->reserve(fib->size());
    for (const auto& d : *fib) fib_basis->push_back(eval_real_sh_basis(d));
    auto tdirs = std::make_shared<std::vector<Vec3>>(n, Vec3{0, 0, 1});
    auto wvox = std::make_shared<std::vector<double>>(n, 0.0);
    double mean_p2 = 0;
    for (std::size_t v = 0; v < n; ++v) {
        ShCoeffs c{};
        for (int i = 0; i < 6; ++i) c[std::size_t(i)] = target->value[std::size_t(i + 1) * n + v];
        const double p2 = sh_power(c)[1];
        (*wvox)[v] = p2;
        mean_p2 += p2;
        if (p2 > 0) (*tdirs)[v] = soft_argmax_direction(c, *fib, weights.temperature);
    }
    mean_p2 /= double(n);
    if (mean_p2 > 0)
        for (auto& w : *wvox) w /= mean_p2;
    auto ang = net_detail::angular_loss_op(tape, pred, tdirs, wvox, fib, fib_basis, weights.temperature);

    // forward-consistency: re-degrade the prediction with this iteration's
    // blur/resample and compare to the LR input on its grid
    ad::TensorPtr cons;
    if (degrade.active()) {
        auto blurred = ad::gaussian_blur_op(tape, pred, degrade.blur_sigma_vox);
        auto down = ad::resample_op(tape, blurred, degrade.low_dims);
        auto up = ad::resample_op(tape, down, {pred->shape[1], pred->shape[2], pred->shape[3]});
        cons = ad::mse_loss(tape, up, lr_input);
    } else {
        cons = ad::mse_loss(tape, pred, lr_input);
    }

    auto total = ad::sum_scaled(tape, {l2, l1, ang, cons},
                                {weights.lowb_l2, weights.l2order_l1, weights.angular, weights.consistency});
    if (terms) {
        terms->lowb_l2 = l2->value[0];
        terms->l2order_l1 = l1->value[0];
        terms->angular = ang->value[0];
        terms->consistency = cons->value[0];
        terms->total = total->value[0];
    }
    return total;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 60;
    int iterations_per_epoch = 20;
    int batch_size = 1;
    double lr_base = 1e-4;
    double lr_init = 1e-5;
    int warmup_epochs = 100;
    double beta1 = 0.9;
    double beta2 = 0.95;
    std::uint64_t seed = 0;
    AugmentConfig augment;
    LossWeights loss;
    // which augmentations run when building the LR sample
    bool use_gamma_bias_noise = true;
    bool use_resample = true;
    bool use_angular_subsample = true;
    bool use_low_rank_mix = true;
    bool use_sh_drift = false;
    bool use_deform = false;
    // direction-subset refit: evaluate the SH signal on a direction set,
    // keep a random electrostatic subset, refit the coefficients (the
    // evaluation-protocol form of angular degradation)
    bool use_direction_refit = false;
    int refit_direction_count = 18;
    int refit_keep = 9;
    double refit_signal_noise = 0.01;  // per-direction signal noise before the refit
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"iterations_per_epoch", c.iterations_per_epoch},
                       {"batch_size", c.batch_size},
                       {"lr_base", c.lr_base},
                       {"lr_init", c.lr_init},
                       {"warmup_epochs", c.warmup_epochs},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"seed", c.seed},
                       {"augment", c.augment},
                       {"loss", c.loss},
                       {"use_gamma_bias_noise", c.use_gamma_bias_noise},
                       {"use_resample", c.use_resample},
                       {"use_angular_subsample", c.use_angular_subsample},
                       {"use_low_rank_mix", c.use_low_rank_mix},
                       {"use_sh_drift", c.use_sh_drift},
                       {"use_deform", c.use_deform},
                       {"use_direction_refit", c.use_direction_refit},
                       {"refit_direction_count", c.refit_direction_count},
                       {"refit_keep", c.refit_keep},
                       {"refit_signal_noise", c.refit_signal_noise}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.iterations_per_epoch = j.value("iterations_per_epoch", d.iterations_per_epoch);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr_base = j.value("lr_base", d.lr_base);
    c.lr_init = j.value("lr_init", d.lr_init);
    c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.seed = j.value("seed", d.seed);
    if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
    if (j.contains("loss")) c.loss = j.at("loss").get<LossWeights>();
    c.use_gamma_bias_noise = j.value("use_gamma_bias_noise", d.use_gamma_bias_noise);
    c.use_resample = j.value("use_resample", d.use_resample);
    c.use_angular_subsample = j.value("use_angular_subsample", d.use_angular_subsample);
    c.use_low_rank_mix = j.value("use_low_rank_mix", d.use_low_rank_mix);
    c.use_sh_drift = j.value("use_sh_drift", d.use_sh_drift);
    c.use_deform = j.value("use_deform", d.use_deform);
    c.use_direction_refit = j.value("use_direction_refit", d.use_direction_refit);
    c.refit_direction_count = j.value("refit_direction_count", d.refit_direction_count);
    c.refit_keep = j.value("refit_keep", d.refit_keep);
    c.refit_signal_noise = j.value("refit_signal_noise", d.refit_signal_noise);
}

// linear warm-up from lr_init to lr_base over warmup_epochs
inline double learning_rate_at(const TrainConfig& cfg, int epoch) {
    if (epoch >= cfg.warmup_epochs) return cfg.lr_base;
    return cfg.lr_init + (cfg.lr_base - cfg.lr_init) * double(epoch) / double(cfg.warmup_epochs);
}

struct TrainRecord {
    int epoch = 0;
    int iteration = 0;
    double lr = 0;
    CompositeLossTerms terms;
};

struct TrainResult {
    std::vector<TrainRecord> history;
    bool aborted_on_nan = false;
};

namespace net_detail {

inline ad::TensorPtr field_to_tensor(const Volume& field) {
    auto t = ad::make_tensor({field.channels, field.grid.dims[2], field.grid.dims[1], field.grid.dims[0]});
    // Volume is x-fastest / channel-slowest, matching (C, Z, Y, X) layout
    std::copy(field.data.begin(), field.data.end(), t->value.begin());
    return t;
}

inline Volume tensor_to_field(const ad::TensorPtr& t, const VolumeGrid& grid) {
    Volume out(grid, t->shape[0]);
    std::copy(t->value.begin(), t->value.end(), out.data.begin());
    return out;
}

// LR construction for one training iteration; remembers the blur/resample
// settings for the forward-consistency term.
struct LrBuild {
    ShSample lr;
    DegradeSettings degrade;
};

inline LrBuild build_lr_sample(const ShSample& hr_patch, const TrainConfig& cfg, Rng& rng) {
    LrBuild out;
    ShSample lr = hr_patch;
    if (cfg.use_deform) lr = deform_patch(lr, cfg.augment, rng);
    if (cfg.use_sh_drift) lr = sh_drift(lr, cfg.augment, rng);
    if (cfg.use_direction_refit) {
        const auto pool = fibonacci_sphere(256);
        const auto full_idx = electrostatic_subset(pool, std::size_t(cfg.refit_direction_count));
        std::vector<Vec3> dirs;
        for (auto i : full_idx) dirs.push_back(pool[i]);
        const auto keep_idx = electrostatic_subset(dirs, std::size_t(cfg.refit_keep),
                                                   std::size_t(rng.uniform_int(0, cfg.refit_direction_count - 1)));
        std::vector<Vec3> kept;
        std::vector<std::array<double, 6>> basis;
        for (auto i : keep_idx) {
            kept.push_back(dirs[i]);
            basis.push_back(eval_real_sh_basis(dirs[i]));
        }
        const ShFitOperator refit(kept);
        const std::size_t n = lr.voxel_count();
        const double sigma = rng.uniform(0.0, cfg.refit_signal_noise);
        std::vector<double> signals(kept.size());
        for (std::size_t v = 0; v < n; ++v) {
            const ShCoeffs c = lr.coeffs(v);
            for (std::size_t k = 0; k < kept.size(); ++k) {
                double s = 0;
                for (int i = 0; i < 6; ++i) s += c[std::size_t(i)] * basis[k][std::size_t(i)];
                signals[k] = s + rng.normal(0.0, sigma);
            }
            lr.set_coeffs(v, refit.fit(signals));
        }
    }
    if (cfg.use_low_rank_mix) {
        MatX v(6, 2), q(2, 6);
        for (int i = 0; i < 6; ++i)
            for (int k = 0; k < 2; ++k) {
                v(i, k) = rng.uniform(cfg.augment.mix_range[0], cfg.augment.mix_range[1]);
                q(k, i) = rng.uniform(cfg.augment.mix_range[0], cfg.augment.mix_range[1]);
            }
        const std::size_t n = lr.voxel_count();
        for (std::size_t vox = 0; vox < n; ++vox) lr.set_coeffs(vox, low_rank_mix(lr.coeffs(vox), v, q));
    }
    if (cfg.use_angular_subsample) lr = angular_subsample(lr, cfg.augment, rng);

    // gamma / bias / noise / blur+resample (the geometric block)
    double target_mm = lr.grid().voxel_size[0];
    {
        const std::size_t n = lr.voxel_count();
        const double src_mm = lr.grid().voxel_size[0];
        if (cfg.use_gamma_bias_noise) {
            const double coarse_vox = std::max(2.0, cfg.augment.bias_grid_mm / src_mm);
            Volume gamma_field = random_smooth_field(lr.grid(), coarse_vox, cfg.augment.gamma_std, rng);
            for (auto& g : gamma_field.data) g = std::exp(g);
            degrade_detail::apply_gamma_channel(lr.field, 0, gamma_field);
            degrade_detail::apply_gamma_channel(lr.field, 1, gamma_field);
            const Volume log_bias = random_smooth_field(lr.grid(), coarse_vox, cfg.augment.bias_sigma, rng);
            for (int c = 0; c < 2; ++c)
                for (std::size_t i = 0; i < n; ++i)
                    lr.field.data[std::size_t(c) * n + i] *= std::exp(log_bias.data[i]);
            const double sigma = rng.uniform(0.0, cfg.augment.noise_sigma_max);
            for (auto& v : lr.field.data) v += rng.normal(0.0, sigma);
            for (std::size_t i = 0; i < n; ++i) lr.field.data[i] = std::max(0.0, lr.field.data[i]);
        }
        if (cfg.use_resample) {
            target_mm = rng.uniform(cfg.augment.resample_range_mm[0], cfg.augment.resample_range_mm[1]);
            if (target_mm > src_mm * (1 + 1e-9)) {
                const Volume low = degrade_resolution(lr.field, {target_mm, target_mm, target_mm});
                lr.field = resample_trilinear(low, lr.grid());
                out.degrade = DegradeSettings::for_resolution(lr.grid(), target_mm);
            }
        }
    }
    out.lr = std::move(lr);
    return out;
}

}  // namespace net_detail

// Per iteration: draw an HR patch, run the degradation chain, forward,
// composite loss, ADAM step. Bit-reproducible for a fixed seed.
inline TrainResult train(const std::vector<ShSample>& dataset, SrModel& model, const TrainConfig& cfg) {
    if (dataset.empty()) throw ArgumentError("train: needs at least one sample");
    Rng rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
    TrainResult result;

    // normalization uses each sample's global mean low-b, matching inference
    std::vector<double> sample_scale(dataset.size(), 1.0);
    for (std::size_t s = 0; s < dataset.size(); ++s) {
        double mean = 0;
        for (std::size_t i = 0; i < dataset[s].voxel_count(); ++i) mean += dataset[s].field.data[i];
        mean /= double(dataset[s].voxel_count());
        sample_scale[s] = mean > 1e-12 ? mean : 1.0;
    }

    std::vector<double> m(model.store->total_size(), 0.0), v(model.store->total_size(), 0.0);
    long t = 0;
    std::vector<double> best_params = model.store->flatten();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = learning_rate_at(cfg, epoch);
        for (int iter = 0; iter < cfg.iterations_per_epoch; ++iter) {
            model.store->zero_grad();
            CompositeLossTerms mean_terms;
            for (int bi = 0; bi < cfg.batch_size; ++bi) {
                const auto sample_idx = std::size_t(rng.uniform_int(0, std::int64_t(dataset.size()) - 1));
                const auto& sample = dataset[sample_idx];
                ShSample hr;
                for (int attempt = 0; attempt < 20; ++attempt) {
                    std::array<int, 3> offset{};
                    for (int a = 0; a < 3; ++a) {
                        const int room = sample.grid().dims[std::size_t(a)] - cfg.augment.crop_size[std::size_t(a)];
                        if (room < 0) throw ArgumentError("train: crop larger than sample");
                        offset[std::size_t(a)] = int(rng.uniform_int(0, room));
                    }
                    hr = crop_sample(sample, offset, cfg.augment.crop_size);
                    double patch_mean = 0;
                    for (std::size_t i = 0; i < hr.voxel_count(); ++i) patch_mean += hr.field.data[i];
                    patch_mean /= double(hr.voxel_count());
                    if (patch_mean >= 0.05 * sample_scale[sample_idx]) break;  // skip signal-free crops
                }
                for (auto& x : hr.field.data) x /= sample_scale[sample_idx];
                auto built = net_detail::build_lr_sample(hr, cfg, rng);

                ad::Tape tape;
                auto input = net_detail::field_to_tensor(built.lr.field);
                auto target = net_detail::field_to_tensor(hr.field);
                auto pred = sr_forward(tape, model, input);
                CompositeLossTerms terms;
                auto loss = composite_loss(tape, pred, target, input, built.degrade, cfg.loss, &terms);
                if (!std::isfinite(loss->value[0])) {
                    model.store->load_flat(best_params);
                    result.aborted_on_nan = true;
                    return result;
                }
                tape.backward(loss);
                mean_terms.total += terms.total / cfg.batch_size;
                mean_terms.lowb_l2 += terms.lowb_l2 / cfg.batch_size;
                mean_terms.l2order_l1 += terms.l2order_l1 / cfg.batch_size;
                mean_terms.angular += terms.angular / cfg.batch_size;
                mean_terms.consistency += terms.consistency / cfg.batch_size;
            }

            // ADAM step over the flattened parameters
            ++t;
            const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
            const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
            std::size_t off = 0;
            for (auto& p : model.store->params()) {
                for (std::size_t i = 0; i < p->size(); ++i, ++off) {
                    const double g = p->grad[i] / cfg.batch_size;
                    m[off] = cfg.beta1 * m[off] + (1 - cfg.beta1) * g;
                    v[off] = cfg.beta2 * v[off] + (1 - cfg.beta2) * g * g;
                    p->value[i] -= lr * (m[off] / bc1) / (std::sqrt(v[off] / bc2) + 1e-8);
                }
            }
            best_params = model.store->flatten();
            result.history.push_back({epoch, iter, lr, mean_terms});
        }
    }
    return result;
}

inline void write_loss_csv(const TrainResult& result, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write loss history: " + path);
    f << "epoch,iteration,lr,total,lowb_l2,l2order_l1,angular,consistency\n";
    for (const auto& r : result.history)
        f << r.epoch << "," << r.iteration << "," << r.lr << "," << r.terms.total << "," << r.terms.lowb_l2
          << "," << r.terms.l2order_l1 << "," << r.terms.angular << "," << r.terms.consistency << "\n";
}

// ---------------------------------------------------------------------------
// Checkpoint: 8-byte little-endian header length, JSON header (architecture,
// channel order, seed, loss weights), float32 parameter payload in
// declaration order.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const SrModel& model, const LossWeights& loss, const std::string& path) {
    nlohmann::json header;
    header["format"] = "dtisr-checkpoint-v1";
    header["config"] = model.config;
    header["channel_order"] = ShSample::kChannelOrder;
    header["seed"] = model.init_seed;
    header["loss_weights"] = loss;
    header["parameter_count"] = model.store->total_size();
    const std::string head = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    const std::uint64_t len = head.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(head.data(), std::streamsize(head.size()));
    const auto flat = model.store->flatten();
    std::vector<float> payload(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) payload[i] = float(flat[i]);
    f.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size() * 4));
    if (!f) throw IoError("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
    SrModel model;
    LossWeights loss;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    if (!f || len == 0 || len > (1u << 20)) throw FormatError("bad checkpoint header: " + path);
    std::string head(len, '\0');
    f.read(head.data(), std::streamsize(len));
    nlohmann::json header = nlohmann::json::parse(head, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "dtisr-checkpoint-v1")
        throw FormatError("not a dtisr checkpoint: " + path);

    LoadedCheckpoint out{SrModel::create(header.at("config").get<MiniUNetConfig>(),
                                         header.value("seed", std::uint64_t(0))),
                         header.value("loss_weights", LossWeights{})};
    const std::size_t count = header.at("parameter_count").get<std::size_t>();
    if (count != out.model.store->total_size())
        throw FormatError("checkpoint parameter count mismatch: " + path);
    std::vector<float> payload(count);
    f.read(reinterpret_cast<char*>(payload.data()), std::streamsize(count * 4));
    if (!f) throw CorruptionError("truncated checkpoint payload: " + path);
    std::vector<double> flat(count);
    for (std::size_t i = 0; i < count; ++i) flat[i] = double(payload[i]);
    out.model.store->load_flat(flat);
    return out;
}

// ---------------------------------------------------------------------------
// Inference: trilinear pre-upsample to the target grid, normalize, run the
// model (tiled with cosine overlap blending when the volume exceeds the tile
// size), renormalize by the input low-b mean and direction-averaged
// intensity.
// ---------------------------------------------------------------------------

struct SuperresolveSettings {
    std::array<int, 3> tile{32, 32, 32};
    int tile_overlap = 8;
};

namespace net_detail {

inline Volume run_model_padded(const SrModel& model, const Volume& field) {
    // pad spatial dims up to the U-Net multiple, run, crop back
    const int mult = model.config.dim_multiple();
    std::array<int, 3> padded{};
    for (int a = 0; a < 3; ++a)
        padded[std::size_t(a)] = (field.grid.dims[std::size_t(a)] + mult - 1) / mult * mult;
    Volume work = field;
    if (padded != field.grid.dims) {
        VolumeGrid g = field.grid;
        g.dims = padded;
        Volume grown(g, field.channels);
        for (int c = 0; c < field.channels; ++c)
            for (int z = 0; z < padded[2]; ++z)
                for (int y = 0; y < padded[1]; ++y)
                    for (int x = 0; x < padded[0]; ++x)
                        grown.at(x, y, z, c) = field.at(std::min(x, field.grid.dims[0] - 1),
                                                        std::min(y, field.grid.dims[1] - 1),
                                                        std::min(z, field.grid.dims[2] - 1), c);
        work = std::move(grown);
    }
    ad::Tape tape;
    auto input = field_to_tensor(work);
    auto pred = sr_forward(tape, model, input);
    Volume out_full = tensor_to_field(pred, work.grid);
    if (padded == field.grid.dims) return out_full;
    Volume out(field.grid, field.channels);
    for (int c = 0; c < field.channels; ++c)
        for (int z = 0; z < field.grid.dims[2]; ++z)
            for (int y = 0; y < field.grid.dims[1]; ++y)
                for (int x = 0; x < field.grid.dims[0]; ++x) out.at(x, y, z, c) = out_full.at(x, y, z, c);
    return out;
}

}  // namespace net_detail

inline ShSample superresolve(const SrModel& model, const ShSample& input, const VolumeGrid& target_grid,
                             const SuperresolveSettings& settings = {}) {
    if (model.store->total_size() == 0) throw StateError("superresolve: model has no parameters");
    // pre-upsample to the target grid
    ShSample work;
    work.field = resample_trilinear(input.field, target_grid);

    const std::size_t n = work.voxel_count();
    double lowb_mean = 0, c00_mean = 0;
    for (std::size_t i = 0; i < n; ++i) {
        lowb_mean += work.field.data[i];
        c00_mean += work.field.data[n + i];
    }
    lowb_mean /= double(n);
    c00_mean /= double(n);
    const double scale = lowb_mean > 1e-12 ? lowb_mean : 1.0;
    Volume normalized = work.field;
    for (auto& v : normalized.data) v /= scale;

    const auto& dims = target_grid.dims;
    Volume output(target_grid, ShSample::kChannels);
    const bool needs_tiling = dims[0] > settings.tile[0] || dims[1] > settings.tile[1] || dims[2] > settings.tile[2];
    if (!needs_tiling) {
        output = net_detail::run_model_padded(model, normalized);
    } else {
        Volume weight(target_grid, 1);
        const int overlap = settings.tile_overlap;
        std::array<std::vector<int>, 3> starts;
        for (int a = 0; a < 3; ++a) {
            const int tile = settings.tile[std::size_t(a)];
            const int step = std::max(1, tile - overlap);
            for (int s = 0;; s += step) {
                const int start = std::min(s, std::max(0, dims[std::size_t(a)] - tile));
                starts[std::size_t(a)].push_back(start);
                if (start + tile >= dims[std::size_t(a)]) break;
            }
        }
        auto blend_weight = [&](int local, int extent) {
            // cosine ramp over the overlap margin
            const int m = std::min(overlap, extent / 2);
            if (m <= 0) return 1.0;
            const double from_edge = std::min(local, extent - 1 - local);
            if (from_edge >= m) return 1.0;
            return 0.5 * (1.0 - std::cos(kPi * (from_edge + 0.5) / m));
        };
        for (int sz : starts[2])
            for (int sy : starts[1])
                for (int sx : starts[0]) {
                    std::array<int, 3> tdim{std::min(settings.tile[0], dims[0]),
                                            std::min(settings.tile[1], dims[1]),
                                            std::min(settings.tile[2], dims[2])};
                    VolumeGrid tg = target_grid;
                    tg.dims = tdim;
                    Volume tile_field(tg, ShSample::kChannels);
                    for (int c = 0; c < ShSample::kChannels; ++c)
                        for (int z = 0; z < tdim[2]; ++z)
                            for (int y = 0; y < tdim[1]; ++y)
                                for (int x = 0; x < tdim[0]; ++x)
                                    tile_field.at(x, y, z, c) = normalized.at(sx + x, sy + y, sz + z, c);
                    const Volume tile_out = net_detail::run_model_padded(model, tile_field);
                    for (int z = 0; z < tdim[2]; ++z)
                        for (int y = 0; y < tdim[1]; ++y)
                            for (int x = 0; x < tdim[0]; ++x) {
                                const double w = blend_weight(x, tdim[0]) * blend_weight(y, tdim[1]) *
                                                 blend_weight(z, tdim[2]);
                                weight.at(sx + x, sy + y, sz + z) += w;
                                for (int c = 0; c < ShSample::kChannels; ++c)
                                    output.at(sx + x, sy + y, sz + z, c) += w * tile_out.at(x, y, z, c);
                            }
                }
        for (int c = 0; c < ShSample::kChannels; ++c)
            for (std::size_t i = 0; i < n; ++i) {
                const double w = weight.data[i];
                output.data[std::size_t(c) * n + i] /= w > 0 ? w : 1.0;
            }
    }

    // renormalize: low-b channel to the input's global mean, SH block to the
    // input's direction-averaged intensity (mean l=0 coefficient)
    ShSample result;
    result.field = output;
    for (std::size_t i = 0; i < n; ++i) result.field.data[i] = std::max(0.0, result.field.data[i] * scale);
    double out_lowb = 0, out_c00 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out_lowb += result.field.data[i];
        out_c00 += output.data[n + i] * scale;
    }
    out_lowb /= double(n);
    out_c00 /= double(n);
    if (out_lowb > 1e-12) {
        const double s = lowb_mean / out_lowb;
        for (std::size_t i = 0; i < n; ++i) result.field.data[i] *= s;
    }
    const double sh_scale = (std::abs(out_c00) > 1e-12 && std::abs(c00_mean) > 1e-12) ? c00_mean / out_c00 : 1.0;
    for (int c = 1; c < ShSample::kChannels; ++c)
        for (std::size_t i = 0; i < n; ++i)
            result.field.data[std::size_t(c) * n + i] = output.data[std::size_t(c) * n + i] * scale * sh_scale;
    return result;
}

}  // namespace dtisr
