#include "doctest.h"

#include "dtisr/phantom.hpp"

using namespace dtisr;

TEST_CASE("ulf gradient table layout") {
    const GradientTable t = ulf_gradient_table(700.0);
    REQUIRE(t.size() == 12);
    CHECK(t.bvals[2] == 0.0);
    CHECK(t.bvals[6] == 0.0);
    CHECK(t.bvals[10] == 0.0);
    CHECK(t.dwi_indices().size() == 9);
    for (auto i : t.dwi_indices()) {
        CHECK(t.bvals[i] == doctest::Approx(700.0));
        CHECK(std::abs(norm(t.bvecs[i]) - 1.0) < 1e-12);
    }
    t.validate();
    // the geometry supports a full tensor fit
    DwiDataset probe;
    probe.gradients = t;
    probe.volume = Volume(VolumeGrid::isotropic({2, 2, 2}, 1.0), 12, 10.0);
    probe.validate();
}

TEST_CASE("make_tensor_field scenes") {
    SUBCASE("isotropic sphere has FA 0 everywhere inside") {
        PhantomSpec spec;
        spec.grid = VolumeGrid::isotropic({16, 16, 16}, 2.0);
        spec.scene = PhantomScene::IsotropicSphere;
        const PhantomField f = make_tensor_field(spec);
        bool any_inside = false;
        for (std::size_t i = 0; i < f.labels.grid.voxel_count(); ++i) {
            if (f.labels.data[i] == 0) continue;
            any_inside = true;
            CHECK(f.fa_truth.data[i] == doctest::Approx(0.0).epsilon(1e-12));
        }
        CHECK(any_inside);
    }
    SUBCASE("single bundle voxels carry the bundle axis") {
        PhantomSpec spec;
        spec.grid = VolumeGrid::isotropic({18, 18, 18}, 2.0);
        spec.scene = PhantomScene::SingleBundle;
        spec.seed = 4;
        const PhantomField f = make_tensor_field(spec);
        const std::size_t n = f.labels.grid.voxel_count();
        std::size_t wm = 0;
        Vec3 axis{0, 0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            if (int(f.labels.data[i]) != int(Tissue::WM)) continue;
            const Vec3 v{f.v1_truth.data[i], f.v1_truth.data[n + i], f.v1_truth.data[2 * n + i]};
            if (wm == 0) axis = v;
            CHECK(std::abs(dot(v, axis)) > 1.0 - 1e-9);
            const auto m = tensor_metrics(f.tensors.tensors[i]);
            CHECK(std::abs(dot(m.v1, axis)) > 1.0 - 1e-9);
            ++wm;
        }
        CHECK(wm > 20);
    }
    SUBCASE("curved bundle v1 matches the analytic tangent within 1 degree") {
        PhantomSpec spec;
        spec.grid = VolumeGrid::isotropic({24, 24, 24}, 1.5);
        spec.scene = PhantomScene::CurvedBundle;
        spec.seed = 9;
        const PhantomField f = make_tensor_field(spec);
        const std::size_t n = f.labels.grid.voxel_count();
        std::size_t wm = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (int(f.labels.data[i]) != int(Tissue::WM)) continue;
            const Vec3 tangent{f.v1_truth.data[i], f.v1_truth.data[n + i], f.v1_truth.data[2 * n + i]};
            if (norm(tangent) < 0.5) continue;
            const auto m = tensor_metrics(f.tensors.tensors[i]);
            const double angle = std::acos(std::min(1.0, std::abs(dot(m.v1, tangent)))) * 180.0 / kPi;
            CHECK(angle < 1.0);
            ++wm;
        }
        CHECK(wm > 20);
    }
    SUBCASE("crossing bundles blend tensors in the overlap") {
        PhantomSpec spec;
        spec.grid = VolumeGrid::isotropic({20, 20, 20}, 1.5);
        spec.scene = PhantomScene::CrossingBundles;
        spec.seed = 2;
        const PhantomField f = make_tensor_field(spec);
        std::size_t wm = 0;
        for (std::size_t i = 0; i < f.labels.grid.voxel_count(); ++i)
            if (int(f.labels.data[i]) == int(Tissue::WM)) ++wm;
        CHECK(wm > 40);
    }
    SUBCASE("deterministic given the seed") {
        PhantomSpec spec;
        spec.grid = VolumeGrid::isotropic({12, 12, 12}, 2.0);
        spec.scene = PhantomScene::CurvedBundle;
        spec.seed = 77;
        const PhantomField a = make_tensor_field(spec);
        const PhantomField b = make_tensor_field(spec);
        for (std::size_t i = 0; i < a.labels.data.size(); ++i) {
            CHECK(a.labels.data[i] == b.labels.data[i]);
            CHECK(a.tensors.tensors[i].xx == b.tensors.tensors[i].xx);
        }
    }
}

TEST_CASE("synthesize_dwi") {
    PhantomSpec spec;
    spec.grid = VolumeGrid::isotropic({12, 12, 12}, 2.5);
    spec.scene = PhantomScene::SingleBundle;
    spec.seed = 6;
    const PhantomField f = make_tensor_field(spec);
    const GradientTable table = ulf_gradient_table(700.0);

    SUBCASE("no bias and no noise matches the forward model exactly") {
        Rng rng(1);
        const DwiDataset d = synthesize_dwi(f.tensors, table, f.s0, nullptr, 0.0, rng);
        const std::size_t n = spec.grid.voxel_count();
        for (std::size_t c = 0; c < table.size(); ++c)
            for (std::size_t i = 0; i < n; i += 37) {
                const double expected =
                    st_forward(f.s0.data[i], f.tensors.tensors[i], table.bvals[c], table.bvecs[c]);
                CHECK(d.volume.data[c * n + i] == doctest::Approx(expected).epsilon(1e-14));
            }
    }
    SUBCASE("uniform gamma of 2 doubles every diffusion-weighted signal") {
        InjectedBias bias;
        bias.log_gamma = BiasCoefficients(9);
        bias.log_upsilon = BiasCoefficients(9);
        for (auto& row : bias.log_gamma.c) row[0] = std::log(2.0);
        Rng rng(1);
        const DwiDataset clean = synthesize_dwi(f.tensors, table, f.s0, nullptr, 0.0, rng);
        const DwiDataset doubled = synthesize_dwi(f.tensors, table, f.s0, &bias, 0.0, rng);
        const std::size_t n = spec.grid.voxel_count();
        for (auto c : table.dwi_indices())
            for (std::size_t i = 0; i < n; i += 53)
                CHECK(doubled.volume.data[c * n + i] == doctest::Approx(2.0 * clean.volume.data[c * n + i]));
        for (auto c : table.b0_indices())
            for (std::size_t i = 0; i < n; i += 53)
                CHECK(doubled.volume.data[c * n + i] == clean.volume.data[c * n + i]);
    }
    SUBCASE("forward-then-fit recovers the phantom tensors") {
        Rng rng(1);
        const DwiDataset d = synthesize_dwi(f.tensors, table, f.s0, nullptr, 0.0, rng);
        const TensorMapResult fit = fit_tensor_map(d);
        const std::size_t n = spec.grid.voxel_count();
        for (std::size_t i = 0; i < n; i += 11) {
            if (f.labels.data[i] == 0) continue;
            const auto& truth = f.tensors.tensors[i];
            const auto& got = fit.tensors.tensors[i];
            const double scale = truth.xx + truth.yy + truth.zz;
            CHECK(std::abs(got.xx - truth.xx) < 1e-9 * scale);
            CHECK(std::abs(got.yy - truth.yy) < 1e-9 * scale);
            CHECK(std::abs(got.xy - truth.xy) < 1e-9 * scale);
        }
    }
    SUBCASE("per-direction bias creates distinct per-direction intensity structure") {
        PhantomSpec iso_spec;
        iso_spec.grid = VolumeGrid::isotropic({14, 14, 14}, 3.0);
        iso_spec.scene = PhantomScene::IsotropicSphere;
        const PhantomField iso = make_tensor_field(iso_spec);
        const DctBiasBasis basis(iso_spec.grid);
        InjectedBiasSettings settings;
        for (auto i : table.dwi_indices()) settings.directions.push_back(table.bvecs[i]);
        Rng brng(5);
        const InjectedBias bias = make_injected_bias(basis, 9, brng, settings);
        Rng rng(1);
        const DwiDataset d = synthesize_dwi(iso.tensors, table, iso.s0, &bias, 0.0, rng);
        // per-direction DCT spectra of the (bias-carrying) signals differ
        const std::size_t n = iso_spec.grid.voxel_count();
        const auto dwi = table.dwi_indices();
        std::vector<std::array<double, 6>> spectra;
        for (auto c : dwi) {
            std::vector<double> field(n);
            for (std::size_t i = 0; i < n; ++i) field[i] = d.volume.data[c * n + i];
            std::vector<double> w(n, 1.0);
            spectra.push_back(basis.project_weighted(field, w));
        }
        double max_pair_diff = 0;
        for (std::size_t a = 0; a < spectra.size(); ++a)
            for (std::size_t b = a + 1; b < spectra.size(); ++b) {
                double diff = 0;
                for (int k = 1; k < 6; ++k) diff += std::abs(spectra[a][k] - spectra[b][k]);
                max_pair_diff = std::max(max_pair_diff, diff);
            }
        CHECK(max_pair_diff > 1.0);  // directions carry visibly different smooth fields
    }
    SUBCASE("deterministic given seed, including Rician noise") {
        Rng r1(9), r2(9);
        const DwiDataset a = synthesize_dwi(f.tensors, table, f.s0, nullptr, 50.0, r1);
        const DwiDataset b = synthesize_dwi(f.tensors, table, f.s0, nullptr, 50.0, r2);
        for (std::size_t i = 0; i < a.volume.data.size(); ++i) CHECK(a.volume.data[i] == b.volume.data[i]);
    }
}

TEST_CASE("make_synthetic_atlas") {
    PhantomSpec spec;
    spec.grid = VolumeGrid::isotropic({16, 16, 16}, 2.0);
    spec.scene = PhantomScene::SingleBundle;
    spec.seed = 8;
    const PhantomField f = make_tensor_field(spec);
    const AtlasPriors atlas = make_synthetic_atlas(f.tensors, f.labels);
    atlas.validate();
    const std::size_t n = spec.grid.voxel_count();

    SUBCASE("isotropic regions have kappa 0") {
        for (std::size_t i = 0; i < n; ++i)
            if (int(f.labels.data[i]) == int(Tissue::CSF))
                CHECK(atlas.kappa[i] == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("bundle voxels carry the tangent as the direction prior") {
        for (std::size_t i = 0; i < n; ++i) {
            if (int(f.labels.data[i]) != int(Tissue::WM)) continue;
            const Vec3 truth{f.v1_truth.data[i], f.v1_truth.data[n + i], f.v1_truth.data[2 * n + i]};
            if (norm(truth) < 0.5) continue;
            CHECK(std::abs(dot(atlas.v1_mu[i], truth)) > 1.0 - 1e-9);
        }
    }
    SUBCASE("Beta mean tracks bundle FA within 0.02") {
        double fa_sum = 0, mean_sum = 0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (int(f.labels.data[i]) != int(Tissue::WM)) continue;
            const double a = atlas.alpha[0][i], b = atlas.beta[0][i];
            fa_sum += f.fa_truth.data[i];
            mean_sum += a / (a + b);
            ++count;
        }
        REQUIRE(count > 0);
        CHECK(std::abs(fa_sum / count - mean_sum / count) < 0.02);
    }
}

TEST_CASE("phantom spec JSON roundtrip") {
    PhantomSpec spec;
    spec.grid = VolumeGrid::isotropic({20, 22, 24}, 3.5);
    spec.scene = PhantomScene::CurvedBundle;
    spec.seed = 31337;
    spec.s0_wm = 640;
    nlohmann::json j = spec;
    const PhantomSpec back = j.get<PhantomSpec>();
    CHECK(back.grid.dims == spec.grid.dims);
    CHECK(back.grid.voxel_size[0] == doctest::Approx(3.5));
    CHECK(back.scene == PhantomScene::CurvedBundle);
    CHECK(back.seed == 31337);
    CHECK(back.s0_wm == doctest::Approx(640));
}
