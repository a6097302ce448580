#include "doctest.h"

#include <filesystem>
#include <functional>

#include "dtisr/net.hpp"
#include "dtisr/phantom.hpp"

using namespace dtisr;

namespace {

void fill_random(const ad::TensorPtr& t, Rng& rng, double scale = 0.5) {
    for (auto& v : t->value) v = rng.uniform(-scale, scale);
}

// central finite-difference check of d(loss)/d(param) at sampled coordinates
double fd_max_rel_error(const std::vector<ad::TensorPtr>& params,
                        const std::function<double()>& loss_value,
                        const std::function<double(bool)>& loss_and_grad, Rng& rng,
                        int coords_per_tensor = 12, double h = 1e-4) {
    for (auto& p : params) p->zero_grad();
    loss_and_grad(true);
    double worst = 0;
    for (auto& p : params) {
        for (int k = 0; k < coords_per_tensor; ++k) {
            const std::size_t i = std::size_t(rng.uniform_int(0, std::int64_t(p->size()) - 1));
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double fp = loss_value();
            p->value[i] = saved - h;
            const double fm = loss_value();
            p->value[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = p->grad[i];
            const double rel = std::abs(analytic - numeric) / (std::max(std::abs(analytic), std::abs(numeric)) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// convenience wrapper when the whole forward fits in one closure
double fd_check(const std::vector<ad::TensorPtr>& params,
                const std::function<ad::TensorPtr(ad::Tape&)>& build, Rng& rng,
                int coords_per_tensor = 12, double h = 1e-4) {
    auto value = [&]() {
        ad::Tape tape;
        return build(tape)->value[0];
    };
    auto value_grad = [&](bool) {
        ad::Tape tape;
        auto loss = build(tape);
        tape.backward(loss);
        return loss->value[0];
    };
    return fd_max_rel_error(params, value, value_grad, rng, coords_per_tensor, h);
}

// squared-sum readout so every output element receives a distinct gradient
ad::TensorPtr sq_sum(ad::Tape& tape, const ad::TensorPtr& x) {
    auto out = tape.tensor({1});
    double s = 0;
    for (std::size_t i = 0; i < x->size(); ++i) s += x->value[i] * x->value[i] * (0.3 + 0.01 * double(i % 7));
    out->value[0] = s;
    tape.record([x, out] {
        for (std::size_t i = 0; i < x->size(); ++i)
            x->grad[i] += out->grad[0] * 2.0 * x->value[i] * (0.3 + 0.01 * double(i % 7));
    });
    return out;
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(101);

    SUBCASE("gelu") {
        auto x = ad::make_tensor({40}, true);
        fill_random(x, rng, 2.0);
        const double err = fd_check({x}, [&](ad::Tape& t) { return sq_sum(t, ad::gelu(t, x)); }, rng, 20);
        CHECK(err < 1e-4);
    }
    SUBCASE("layer_norm") {
        auto x = ad::make_tensor({6, 8}, true);
        auto gain = ad::make_tensor({8}, true);
        auto bias = ad::make_tensor({8}, true);
        fill_random(x, rng, 1.0);
        fill_random(gain, rng, 1.0);
        fill_random(bias, rng, 0.5);
        const double err = fd_check(
            {x, gain, bias}, [&](ad::Tape& t) { return sq_sum(t, ad::layer_norm(t, x, gain, bias)); }, rng, 16);
        CHECK(err < 1e-4);
    }
    SUBCASE("softmax_rows") {
        auto x = ad::make_tensor({5, 9}, true);
        fill_random(x, rng, 2.0);
        const double err =
            fd_check({x}, [&](ad::Tape& t) { return sq_sum(t, ad::softmax_rows(t, x)); }, rng, 20);
        CHECK(err < 1e-4);
    }
    SUBCASE("layer_norm_mid") {
        auto x = ad::make_tensor({3, 7, 2}, true);
        auto gain = ad::make_tensor({2}, true);
        auto bias = ad::make_tensor({2}, true);
        fill_random(x, rng, 1.0);
        fill_random(gain, rng, 1.0);
        fill_random(bias, rng, 0.5);
        const double err = fd_check(
            {x, gain, bias}, [&](ad::Tape& t) { return sq_sum(t, ad::layer_norm_mid(t, x, gain, bias)); },
            rng, 16);
        CHECK(err < 1e-4);
    }
    SUBCASE("matmul both orientations") {
        auto a = ad::make_tensor({4, 6}, true);
        auto b = ad::make_tensor({6, 5}, true);
        auto bt = ad::make_tensor({5, 6}, true);
        fill_random(a, rng);
        fill_random(b, rng);
        fill_random(bt, rng);
        CHECK(fd_check({a, b}, [&](ad::Tape& t) { return sq_sum(t, ad::matmul(t, a, b)); }, rng) < 1e-4);
        CHECK(fd_check({a, bt}, [&](ad::Tape& t) { return sq_sum(t, ad::matmul(t, a, bt, true)); }, rng) < 1e-4);
    }
}

TEST_CASE("volumetric op gradients match finite differences") {
    Rng rng(102);

    SUBCASE("conv3d") {
        auto x = ad::make_tensor({3, 4, 4, 4}, true);
        auto w = ad::make_tensor({2, 3, 3, 3, 3}, true);
        auto b = ad::make_tensor({2}, true);
        fill_random(x, rng);
        fill_random(w, rng);
        fill_random(b, rng);
        const double err =
            fd_check({x, w, b}, [&](ad::Tape& t) { return sq_sum(t, ad::conv3d(t, x, w, b)); }, rng, 16);
        CHECK(err < 1e-4);
    }
    SUBCASE("mean_pool2") {
        auto x = ad::make_tensor({2, 4, 4, 4}, true);
        fill_random(x, rng);
        CHECK(fd_check({x}, [&](ad::Tape& t) { return sq_sum(t, ad::mean_pool2(t, x)); }, rng) < 1e-4);
    }
    SUBCASE("transposed_conv2") {
        auto x = ad::make_tensor({3, 2, 2, 2}, true);
        auto w = ad::make_tensor({3, 2, 2, 2, 2}, true);
        auto b = ad::make_tensor({2}, true);
        fill_random(x, rng);
        fill_random(w, rng);
        fill_random(b, rng);
        CHECK(fd_check({x, w, b}, [&](ad::Tape& t) { return sq_sum(t, ad::transposed_conv2(t, x, w, b)); },
                       rng) < 1e-4);
    }
    SUBCASE("gaussian_blur_op") {
        auto x = ad::make_tensor({2, 5, 4, 6}, true);
        fill_random(x, rng);
        CHECK(fd_check({x}, [&](ad::Tape& t) { return sq_sum(t, ad::gaussian_blur_op(t, x, {1.1, 0.8, 1.4})); },
                       rng, 20) < 1e-4);
    }
    SUBCASE("resample_op down and up") {
        auto x = ad::make_tensor({2, 6, 6, 6}, true);
        fill_random(x, rng);
        CHECK(fd_check({x},
                       [&](ad::Tape& t) {
                           auto down = ad::resample_op(t, x, {3, 3, 3});
                           auto up = ad::resample_op(t, down, {6, 6, 6});
                           return sq_sum(t, up);
                       },
                       rng, 20) < 1e-4);
    }
}

TEST_CASE("graph convolution layer") {
    const Icosphere& sphere = shared_icosphere();
    Rng rng(103);

    SUBCASE("no neighborhood mixing reduces to GELU of the input") {
        ParamStore store;
        GraphConvLayer layer = GraphConvLayer::create(store, 3, 3, rng);
        layer.make_passthrough();
        layer.use_activation = true;  // W=I, b=0, wv=1, wn=0, LN off
        auto h = ad::make_tensor({4, 42, 3}, true);
        fill_random(h, rng, 1.5);
        ad::Tape tape;
        auto out = graph_conv_forward(tape, layer, h, sphere);
        for (std::size_t i = 0; i < h->size(); ++i)
            CHECK(out->value[i] == doctest::Approx(ad::gelu_value(h->value[i])).epsilon(1e-12));
    }
    SUBCASE("constant vertex features stay constant (uniform row degree)") {
        ParamStore store;
        GraphConvLayer layer = GraphConvLayer::create(store, 2, 5, rng);
        auto h = ad::make_tensor({3, 42, 2}, true);
        for (int v = 0; v < 3; ++v)
            for (int a = 0; a < 42; ++a)
                for (int f = 0; f < 2; ++f)
                    h->value[std::size_t((v * 42 + a) * 2 + f)] = 0.3 * v + 0.7 * f;
        ad::Tape tape;
        auto out = graph_conv_forward(tape, layer, h, sphere);
        for (int v = 0; v < 3; ++v)
            for (int a = 1; a < 42; ++a)
                for (int f = 0; f < 5; ++f)
                    CHECK(out->value[std::size_t((v * 42 + a) * 5 + f)] ==
                          doctest::Approx(out->value[std::size_t((v * 42) * 5 + f)]).epsilon(1e-10));
    }
    SUBCASE("parameter gradients match finite differences") {
        ParamStore store;
        GraphConvLayer layer = GraphConvLayer::create(store, 2, 3, rng);
        auto h = ad::make_tensor({2, 42, 2}, true);
        fill_random(h, rng);
        std::vector<ad::TensorPtr> params = {h, layer.w, layer.b, layer.wv, layer.wn, layer.ln_gain, layer.ln_bias};
        const double err = fd_check(
            params, [&](ad::Tape& t) { return sq_sum(t, graph_conv_forward(t, layer, h, sphere)); }, rng, 10);
        CHECK(err < 1e-4);
    }
    SUBCASE("equivariant to consistent vertex relabeling") {
        ParamStore store;
        GraphConvLayer layer = GraphConvLayer::create(store, 2, 2, rng);
        auto h = ad::make_tensor({1, 42, 2}, true);
        fill_random(h, rng);
        ad::Tape tape;
        auto out = graph_conv_forward(tape, layer, h, sphere);
        // permuted copy of the sphere
        std::vector<int> perm(42);
        for (int i = 0; i < 42; ++i) perm[std::size_t(i)] = (i * 11 + 5) % 42;
        Icosphere permuted = sphere;
        for (int i = 0; i < 42; ++i) {
            permuted.vertices[std::size_t(perm[std::size_t(i)])] = sphere.vertices[std::size_t(i)];
            for (int k = 0; k < 6; ++k)
                permuted.knn[std::size_t(perm[std::size_t(i)])][std::size_t(k)] =
                    perm[std::size_t(sphere.knn[std::size_t(i)][std::size_t(k)])];
        }
        auto hp = ad::make_tensor({1, 42, 2}, true);
        for (int i = 0; i < 42; ++i)
            for (int f = 0; f < 2; ++f)
                hp->value[std::size_t(perm[std::size_t(i)] * 2 + f)] = h->value[std::size_t(i * 2 + f)];
        ad::Tape tape2;
        auto outp = graph_conv_forward(tape2, layer, hp, permuted);
        for (int i = 0; i < 42; ++i)
            for (int f = 0; f < 2; ++f)
                CHECK(outp->value[std::size_t(perm[std::size_t(i)] * 2 + f)] ==
                      doctest::Approx(out->value[std::size_t(i * 2 + f)]).epsilon(1e-10));
    }
}

TEST_CASE("ico block") {
    Rng rng(104);

    SUBCASE("passthrough layers give the projection roundtrip identity") {
        ParamStore store;
        MiniUNetConfig cfg;
        cfg.ico_hidden = 1;
        IcoBlock block = IcoBlock::create(store, 1, rng);
        block.make_passthrough();
        auto coeffs = ad::make_tensor({30, 6}, true);
        fill_random(coeffs, rng);
        ad::Tape tape;
        auto out = ico_block_forward(tape, block, coeffs);
        for (std::size_t i = 0; i < coeffs->size(); ++i)
            CHECK(std::abs(out->value[i] - coeffs->value[i]) < 1e-8);
    }
    SUBCASE("zero input with zero biases maps to zero") {
        ParamStore store;
        IcoBlock block = IcoBlock::create(store, 4, rng);
        for (auto& layer : {&block.layer1, &block.layer2}) {
            std::fill(layer->b->value.begin(), layer->b->value.end(), 0.0);
            std::fill(layer->ln_bias->value.begin(), layer->ln_bias->value.end(), 0.0);
            layer->use_layer_norm = false;  // LN of zero rows is bias-only; drop it for the zero test
        }
        auto coeffs = ad::make_tensor({10, 6}, true);
        ad::Tape tape;
        auto out = ico_block_forward(tape, block, coeffs);
        for (double v : out->value) CHECK(v == doctest::Approx(0.0).epsilon(1e-14));
    }
    SUBCASE("gradients through the full block match finite differences") {
        ParamStore store;
        IcoBlock block = IcoBlock::create(store, 3, rng);
        auto coeffs = ad::make_tensor({4, 6}, true);
        fill_random(coeffs, rng);
        std::vector<ad::TensorPtr> params = {coeffs,          block.layer1.w,  block.layer1.b,
                                             block.layer1.wv, block.layer1.wn, block.layer2.w,
                                             block.layer2.b,  block.layer2.wv, block.layer2.wn};
        const double err = fd_check(
            params, [&](ad::Tape& t) { return sq_sum(t, ico_block_forward(t, block, coeffs)); }, rng, 10,
            1e-5);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("mini U-Net") {
    Rng rng(105);

    SUBCASE("output shape equals input shape") {
        for (int size : {8, 16}) {
            ParamStore store;
            MiniUNetConfig cfg;
            cfg.levels = 2;
            cfg.base_features = 4;
            MiniUNet net = MiniUNet::create(store, cfg, rng);
            auto x = ad::make_tensor({7, size, size, size}, true);
            fill_random(x, rng);
            ad::Tape tape;
            auto out = mini_unet_forward(tape, net, x);
            CHECK(out->shape == std::vector<int>{7, size, size, size});
        }
    }
    SUBCASE("all-zero parameters map to zero output") {
        ParamStore store;
        MiniUNetConfig cfg;
        cfg.levels = 2;
        cfg.base_features = 4;
        MiniUNet net = MiniUNet::create(store, cfg, rng);
        for (auto& p : store.params()) std::fill(p->value.begin(), p->value.end(), 0.0);
        auto x = ad::make_tensor({7, 8, 8, 8}, true);
        fill_random(x, rng);
        ad::Tape tape;
        auto out = mini_unet_forward(tape, net, x);
        for (double v : out->value) CHECK(v == 0.0);
    }
    SUBCASE("end-to-end gradient check on a small configuration") {
        ParamStore store;
        MiniUNetConfig cfg;
        cfg.levels = 2;
        cfg.base_features = 2;
        cfg.global_tokens = 4;
        MiniUNet net = MiniUNet::create(store, cfg, rng);
        auto x = ad::make_tensor({7, 4, 4, 4}, true);
        fill_random(x, rng);
        std::vector<ad::TensorPtr> params = {x};
        for (const auto& p : store.params()) params.push_back(p);
        const double err = fd_check(
            params, [&](ad::Tape& t) { return sq_sum(t, mini_unet_forward(t, net, x)); }, rng, 4, 1e-5);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("soft argmax direction") {
    const auto dirs = fibonacci_sphere(256);

    SUBCASE("stick profile along z") {
        // SH fit of a stick-tensor signal peaked along z
        const auto fit_dirs = fibonacci_sphere(32);
        std::vector<double> signal(fit_dirs.size());
        for (std::size_t i = 0; i < fit_dirs.size(); ++i) {
            const double cz = fit_dirs[i][2];
            signal[i] = std::exp(-2.0 * (1.0 - cz * cz));  // peaked at +-z
        }
        const auto coeffs = fit_sh(signal, fit_dirs);
        const Vec3 v = soft_argmax_direction(coeffs, dirs, 0.05);
        const double angle = std::acos(std::min(1.0, std::abs(v[2]))) * 180.0 / kPi;
        CHECK(angle < 2.0);
    }
    SUBCASE("rotation equivariance within discretization error") {
        Rng rng(7);
        const auto fit_dirs = fibonacci_sphere(32);
        std::vector<double> signal(fit_dirs.size());
        for (std::size_t i = 0; i < fit_dirs.size(); ++i) {
            const double cz = fit_dirs[i][2];
            signal[i] = std::exp(-2.0 * (1.0 - cz * cz));
        }
        const auto coeffs = fit_sh(signal, fit_dirs);
        for (int trial = 0; trial < 10; ++trial) {
            const auto w = WignerRotation::from_euler_zyz(rng.uniform(-kPi, kPi), rng.uniform(0, kPi),
                                                          rng.uniform(-kPi, kPi));
            const auto rotated = wigner_rotate(coeffs, w);
            const Vec3 v0 = soft_argmax_direction(coeffs, dirs, 0.05);
            const Vec3 v1 = soft_argmax_direction(rotated, dirs, 0.05);
            const Vec3 expected = w.matrix() * v0;
            const double angle = std::acos(std::min(1.0, std::abs(dot(v1, expected)))) * 180.0 / kPi;
            CHECK(angle < 12.0);  // Fibonacci-256 spacing
        }
    }
}

TEST_CASE("composite loss") {
    Rng rng(106);
    const VolumeGrid grid = VolumeGrid::isotropic({4, 4, 4}, 2.0);

    auto make_field = [&](double anisotropy) {
        ShSample s(grid);
        for (std::size_t v = 0; v < s.voxel_count(); ++v) {
            s.field.data[v] = 1.0 + 0.1 * rng.uniform();
            ShCoeffs c{1.0 + 0.2 * rng.uniform(), 0, 0, anisotropy * (0.5 + rng.uniform()), 0, 0};
            s.set_coeffs(v, c);
        }
        return s;
    };

    SUBCASE("perfect fit plus consistent degrade gives zero loss") {
        const ShSample target = make_field(0.4);
        auto t_target = net_detail::field_to_tensor(target.field);
        auto t_pred = net_detail::field_to_tensor(target.field);
        ad::Tape tape;
        CompositeLossTerms terms;
        DegradeSettings none;
        auto loss = composite_loss(tape, t_pred, t_target, t_target, none, LossWeights{}, &terms);
        CHECK(loss->value[0] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("L1 term isolates a single l=2 channel delta") {
        const ShSample target = make_field(0.4);
        auto t_target = net_detail::field_to_tensor(target.field);
        auto t_pred = net_detail::field_to_tensor(target.field);
        const double delta = 0.37;
        const std::size_t n = target.voxel_count();
        for (std::size_t v = 0; v < n; ++v) t_pred->value[3 * n + v] += delta;  // one l=2 channel
        ad::Tape tape;
        CompositeLossTerms terms;
        DegradeSettings none;
        LossWeights w;
        w.angular = 0;       // perturbing an l=2 channel moves directions too
        w.consistency = 0;   // isolate the L1 term
        composite_loss(tape, t_pred, t_target, t_target, none, w, &terms);
        CHECK(terms.l2order_l1 == doctest::Approx(delta).epsilon(1e-9));
    }
    SUBCASE("loss gradient matches finite differences on a 4^3 field") {
        const ShSample target = make_field(0.6);
        const ShSample lr = make_field(0.5);
        auto t_target = net_detail::field_to_tensor(target.field);
        auto t_lr = net_detail::field_to_tensor(lr.field);
        auto pred = ad::make_tensor({7, 4, 4, 4}, true);
        fill_random(pred, rng, 0.8);
        for (std::size_t i = 0; i < pred->size(); ++i) pred->value[i] += t_target->value[i];
        DegradeSettings degrade = DegradeSettings::for_resolution(grid, 4.0);
        const double err = fd_check(
            {pred},
            [&](ad::Tape& t) { return composite_loss(t, pred, t_target, t_lr, degrade, LossWeights{}); },
            rng, 40, 1e-5);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("training") {
    Rng rng(107);
    // two small phantom-derived samples
    PhantomSpec spec;
    spec.grid = VolumeGrid::isotropic({16, 16, 16}, 2.0);
    spec.scene = PhantomScene::SingleBundle;
    spec.seed = 3;
    const PhantomField field = make_tensor_field(spec);
    const GradientTable table = ulf_gradient_table();
    Rng noise_rng(5);
    const DwiDataset dwi = synthesize_dwi(field.tensors, table, field.s0, nullptr, 0.0, noise_rng);
    const ShSample sample = fit_sh_sample(dwi, 700.0);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.iterations_per_epoch = 2;
    cfg.warmup_epochs = 4;
    cfg.seed = 42;
    cfg.augment.crop_size = {8, 8, 8};
    cfg.augment.resample_range_mm = {3.0, 4.0};
    cfg.use_deform = false;
    cfg.use_sh_drift = false;

    MiniUNetConfig net_cfg;
    net_cfg.levels = 2;
    net_cfg.base_features = 2;
    net_cfg.global_tokens = 2;
    net_cfg.ico_hidden = 2;

    SUBCASE("same seed gives an identical loss history") {
        SrModel m1 = SrModel::create(net_cfg, 9);
        SrModel m2 = SrModel::create(net_cfg, 9);
        const TrainResult r1 = train({sample}, m1, cfg);
        const TrainResult r2 = train({sample}, m2, cfg);
        REQUIRE(r1.history.size() == r2.history.size());
        for (std::size_t i = 0; i < r1.history.size(); ++i)
            CHECK(r1.history[i].terms.total == r2.history[i].terms.total);
        const auto p1 = m1.store->flatten();
        const auto p2 = m2.store->flatten();
        for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);
    }
    SUBCASE("learning-rate warm-up schedule") {
        TrainConfig lr_cfg;
        lr_cfg.warmup_epochs = 100;
        lr_cfg.lr_init = 1e-5;
        lr_cfg.lr_base = 1e-4;
        CHECK(learning_rate_at(lr_cfg, 0) == doctest::Approx(1e-5));
        CHECK(learning_rate_at(lr_cfg, 100) == doctest::Approx(1e-4));
        CHECK(learning_rate_at(lr_cfg, 200) == doctest::Approx(1e-4));
        CHECK(learning_rate_at(lr_cfg, 50) == doctest::Approx(5.5e-5));
    }
}

TEST_CASE("checkpoint roundtrip") {
    MiniUNetConfig cfg;
    cfg.levels = 2;
    cfg.base_features = 2;
    cfg.global_tokens = 2;
    cfg.ico_hidden = 2;
    SrModel model = SrModel::create(cfg, 77);
    const auto dir = std::filesystem::temp_directory_path() / "dtisr_net_tests";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "ck.bin").string();
    LossWeights lw;
    lw.temperature = 0.07;
    save_checkpoint(model, lw, path);
    const LoadedCheckpoint back = load_checkpoint(path);
    CHECK(back.model.config.levels == cfg.levels);
    CHECK(back.model.config.base_features == cfg.base_features);
    CHECK(back.loss.temperature == doctest::Approx(0.07));
    const auto p1 = model.store->flatten();
    const auto p2 = back.model.store->flatten();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p2[i] == doctest::Approx(double(float(p1[i]))));
}

TEST_CASE("superresolve") {
    Rng rng(108);
    PhantomSpec spec;
    spec.grid = VolumeGrid::isotropic({16, 16, 16}, 2.0);
    spec.scene = PhantomScene::SingleBundle;
    spec.seed = 12;
    const PhantomField field = make_tensor_field(spec);
    const GradientTable table = ulf_gradient_table();
    Rng nrng(5);
    const DwiDataset dwi = synthesize_dwi(field.tensors, table, field.s0, nullptr, 0.0, nrng);
    const ShSample sample = fit_sh_sample(dwi, 700.0);

    MiniUNetConfig cfg;
    cfg.levels = 2;
    cfg.base_features = 2;
    cfg.global_tokens = 2;
    cfg.ico_hidden = 2;
    SrModel model = SrModel::create(cfg, 5);

    SUBCASE("low-b renormalization contract") {
        const ShSample out = superresolve(model, sample, sample.grid());
        const std::size_t n = sample.voxel_count();
        double in_mean = 0, out_mean = 0;
        for (std::size_t i = 0; i < n; ++i) {
            in_mean += sample.field.data[i];
            out_mean += out.field.data[i];
        }
        CHECK(out_mean / n == doctest::Approx(in_mean / n).epsilon(1e-6));
    }
    SUBCASE("tiled and untiled inference agree in the blend region") {
        SuperresolveSettings tiled;
        tiled.tile = {12, 12, 12};
        tiled.tile_overlap = 8;
        SuperresolveSettings whole;
        whole.tile = {64, 64, 64};
        const ShSample a = superresolve(model, sample, sample.grid(), tiled);
        const ShSample b = superresolve(model, sample, sample.grid(), whole);
        const std::size_t n = sample.voxel_count();
        // channel std of the untiled output for scale
        for (int c = 0; c < 7; ++c) {
            double mean = 0;
            for (std::size_t i = 0; i < n; ++i) mean += b.field.data[std::size_t(c) * n + i];
            mean /= double(n);
            double var = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = b.field.data[std::size_t(c) * n + i] - mean;
                var += d * d;
            }
            const double sd = std::sqrt(var / double(n));
            double worst = 0;
            // interior blend region only: tile borders see different padding
            for (int z = 2; z < 14; ++z)
                for (int y = 2; y < 14; ++y)
                    for (int x = 2; x < 14; ++x)
                        worst = std::max(worst, std::abs(a.field.at(x, y, z, c) - b.field.at(x, y, z, c)));
            CHECK(worst < 0.35 * (sd + 1e-6));
        }
    }
    SUBCASE("inference on an untrained-but-initialized model is finite") {
        VolumeGrid target = VolumeGrid::isotropic({20, 20, 20}, 1.6);
        const ShSample out = superresolve(model, sample, target);
        CHECK(out.grid().dims == target.dims);
        for (double v : out.field.data) CHECK(std::isfinite(v));
    }
}
