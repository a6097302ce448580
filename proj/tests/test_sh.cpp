#include "doctest.h"

#include "dtisr/icosphere.hpp"
#include "dtisr/sh.hpp"

using namespace dtisr;

namespace {

Vec3 random_direction(Rng& rng) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    return normalized(v);
}

ShCoeffs random_coeffs(Rng& rng, double scale = 1.0) {
    ShCoeffs c{};
    for (auto& v : c) v = rng.uniform(-scale, scale);
    return c;
}

}  // namespace

TEST_CASE("real SH basis values") {
    SUBCASE("constant zeroth harmonic") {
        Rng rng(1);
        for (int i = 0; i < 20; ++i) {
            const auto b = eval_real_sh_basis(random_direction(rng));
            CHECK(b[0] == doctest::Approx(0.28209479177387814).epsilon(1e-14));
        }
    }
    SUBCASE("pole values") {
        const auto b = eval_real_sh_basis({0, 0, 1});
        CHECK(b[3] == doctest::Approx(0.6307831305050401).epsilon(1e-12));  // sqrt(5/(4 pi))
        CHECK(std::abs(b[1]) < 1e-15);
        CHECK(std::abs(b[2]) < 1e-15);
        CHECK(std::abs(b[4]) < 1e-15);
        CHECK(std::abs(b[5]) < 1e-15);
    }
    SUBCASE("non-unit direction raises") {
        CHECK_THROWS_AS(eval_real_sh_basis({1, 1, 0}), ArgumentError);
    }
    SUBCASE("Monte Carlo orthonormality") {
        Rng rng(42);
        std::array<std::array<double, 6>, 6> gram{};
        const int samples = 1000000;
        for (int s = 0; s < samples; ++s) {
            const auto b = eval_real_sh_basis(random_direction(rng));
            for (int i = 0; i < 6; ++i)
                for (int j = i; j < 6; ++j) gram[i][j] += b[i] * b[j];
        }
        for (int i = 0; i < 6; ++i)
            for (int j = i; j < 6; ++j) {
                const double val = gram[i][j] * 4.0 * kPi / samples;
                CHECK(std::abs(val - (i == j ? 1.0 : 0.0)) < 3e-3);
            }
    }
}

TEST_CASE("fit_sh") {
    const auto dirs9 = fibonacci_sphere(9);

    SUBCASE("constant signal is pure l=0") {
        const std::vector<double> s(dirs9.size(), 2.5);
        const auto c = fit_sh(s, dirs9);
        CHECK(c[0] == doctest::Approx(2.5 / kY00).epsilon(1e-9));
        for (int i = 1; i < 6; ++i) CHECK(std::abs(c[i]) < 1e-9);
    }
    SUBCASE("synthesize-then-fit recovers coefficients") {
        Rng rng(5);
        for (int trial = 0; trial < 25; ++trial) {
            const auto truth = random_coeffs(rng);
            std::vector<double> s(dirs9.size());
            for (std::size_t i = 0; i < dirs9.size(); ++i) s[i] = eval_sh(truth, dirs9[i]);
            const auto fit = fit_sh(s, dirs9);
            for (int i = 0; i < 6; ++i) CHECK(std::abs(fit[i] - truth[i]) < 1e-9);
        }
    }
    SUBCASE("antipodal duplicates change nothing (even basis)") {
        Rng rng(6);
        const auto truth = random_coeffs(rng);
        std::vector<Vec3> both = dirs9;
        for (const auto& d : dirs9) both.push_back({-d[0], -d[1], -d[2]});
        std::vector<double> s(both.size());
        for (std::size_t i = 0; i < both.size(); ++i) s[i] = eval_sh(truth, both[i]);
        const auto fit = fit_sh(s, both);
        for (int i = 0; i < 6; ++i) CHECK(fit[i] == doctest::Approx(truth[i]).epsilon(1e-9));
    }
    SUBCASE("degenerate direction set raises") {
        std::vector<Vec3> collinear(8, Vec3{0, 0, 1});
        const std::vector<double> s(collinear.size(), 1.0);
        CHECK_THROWS_AS(fit_sh(s, collinear), GeometryError);
    }
}

TEST_CASE("wigner rotation") {
    Rng rng(17);

    SUBCASE("l=0 functions are rotation invariant") {
        const ShCoeffs c{1.7, 0, 0, 0, 0, 0};
        const auto w = WignerRotation::from_euler_zyz(0.4, 1.2, -2.2);
        const auto r = wigner_rotate(c, w);
        for (int i = 0; i < 6; ++i) CHECK(r[i] == doctest::Approx(c[i]).epsilon(1e-14));
    }
    SUBCASE("rotate then inverse is the identity") {
        for (int trial = 0; trial < 200; ++trial) {
            const auto c = random_coeffs(rng);
            const auto w = WignerRotation::from_euler_zyz(rng.uniform(-kPi, kPi), rng.uniform(0, kPi),
                                                          rng.uniform(-kPi, kPi));
            const auto back = wigner_rotate(wigner_rotate(c, w), w.inverse());
            for (int i = 0; i < 6; ++i) CHECK(std::abs(back[i] - c[i]) < 1e-12);
        }
    }
    SUBCASE("function evaluation matches at rotated directions") {
        for (int trial = 0; trial < 50; ++trial) {
            const auto c = random_coeffs(rng);
            const auto w = WignerRotation::from_euler_zyz(rng.uniform(-kPi, kPi), rng.uniform(0, kPi),
                                                          rng.uniform(-kPi, kPi));
            const Mat3 r = w.matrix();
            const auto cr = wigner_rotate(c, w);
            for (int k = 0; k < 100; ++k) {
                const Vec3 u = random_direction(rng);
                const Vec3 ru = normalized(r * u);
                CHECK(std::abs(eval_sh(cr, ru) - eval_sh(c, u)) < 1e-10);
            }
        }
    }
    SUBCASE("per-degree power is preserved") {
        for (int trial = 0; trial < 500; ++trial) {
            const auto c = random_coeffs(rng);
            const auto w = WignerRotation::from_euler_zyz(rng.uniform(-kPi, kPi), rng.uniform(0, kPi),
                                                          rng.uniform(-kPi, kPi));
            const auto p0 = sh_power(c), p1 = sh_power(wigner_rotate(c, w));
            CHECK(std::abs(p0[0] - p1[0]) < 1e-12);
            CHECK(std::abs(p0[1] - p1[1]) < 1e-12);
        }
    }
    SUBCASE("blocks are orthogonal") {
        for (int trial = 0; trial < 50; ++trial) {
            const auto w = WignerRotation::from_euler_zyz(rng.uniform(-kPi, kPi), rng.uniform(0, kPi),
                                                          rng.uniform(-kPi, kPi));
            for (int i = 0; i < 5; ++i)
                for (int j = 0; j < 5; ++j) {
                    double s = 0;
                    for (int k = 0; k < 5; ++k) s += w.block2[i][k] * w.block2[j][k];
                    CHECK(std::abs(s - (i == j ? 1.0 : 0.0)) < 1e-12);
                }
        }
    }
    SUBCASE("independent oracle: quadratic-form decomposition of the l=2 block") {
        // Y2 basis functions are quadratic forms u'Qu; rotating the function
        // maps Q -> R Q R' and the block entries are Frobenius projections.
        const double s1 = std::sqrt(15.0 / (4.0 * kPi));
        const double s2 = std::sqrt(5.0 / (16.0 * kPi));
        const double s3 = std::sqrt(15.0 / (16.0 * kPi));
        std::array<Mat3, 5> q{};
        q[0] = {{{0, 0.5 * s1, 0}, {0.5 * s1, 0, 0}, {0, 0, 0}}};
        q[1] = {{{0, 0, 0}, {0, 0, 0.5 * s1}, {0, 0.5 * s1, 0}}};
        q[2] = {{{-s2, 0, 0}, {0, -s2, 0}, {0, 0, 2 * s2}}};
        q[3] = {{{0, 0, 0.5 * s1}, {0, 0, 0}, {0.5 * s1, 0, 0}}};
        q[4] = {{{s3, 0, 0}, {0, -s3, 0}, {0, 0, 0}}};
        const double qnorm = 15.0 / (8.0 * kPi);
        for (int trial = 0; trial < 50; ++trial) {
            const auto w = WignerRotation::from_euler_zyz(rng.uniform(-kPi, kPi), rng.uniform(0, kPi),
                                                          rng.uniform(-kPi, kPi));
            const Mat3 r = w.matrix();
            for (int m = 0; m < 5; ++m) {
                const Mat3 rq = r * (q[m] * transpose(r));
                for (int k = 0; k < 5; ++k) {
                    double ip = 0;
                    for (int i = 0; i < 3; ++i)
                        for (int j = 0; j < 3; ++j) ip += rq[i][j] * q[k][i][j];
                    CHECK(std::abs(ip / qnorm - w.block2[k][m]) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("icosphere") {
    const Icosphere s = build_icosphere();

    SUBCASE("42 unit vertices") {
        REQUIRE(int(s.vertices.size()) == 42);
        for (const auto& v : s.vertices) CHECK(std::abs(norm(v) - 1.0) < 1e-12);
    }
    SUBCASE("natural neighbor structure of the subdivision") {
        for (int i = 0; i < 12; ++i) {
            CHECK(s.natural_neighbors[i].size() == 5);
            for (int nb : s.natural_neighbors[i]) CHECK(nb >= 12);  // originals touch only midpoints
        }
        for (int i = 12; i < 42; ++i) CHECK(s.natural_neighbors[i].size() == 6);
        // adjacency of natural edges is symmetric
        for (int i = 0; i < 42; ++i)
            for (int nb : s.natural_neighbors[i]) {
                const auto& back = s.natural_neighbors[nb];
                CHECK(std::find(back.begin(), back.end(), i) != back.end());
            }
    }
    SUBCASE("KNN(6) contains all natural neighbors of the originals") {
        for (int i = 0; i < 12; ++i)
            for (int nb : s.natural_neighbors[i])
                CHECK(std::find(s.knn[i].begin(), s.knn[i].end(), nb) != s.knn[i].end());
    }
    SUBCASE("projection matches per-vertex basis evaluation") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            const auto c = random_coeffs(rng);
            const auto h = project_to_icosphere(c, s);
            for (int j = 0; j < 42; ++j)
                CHECK(std::abs(h[j] - eval_sh(c, s.vertices[j])) < 1e-12);
        }
    }
    SUBCASE("projection is linear") {
        Rng rng(4);
        const auto c1 = random_coeffs(rng), c2 = random_coeffs(rng);
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
        ShCoeffs mix{};
        for (int i = 0; i < 6; ++i) mix[i] = a * c1[i] + b * c2[i];
        const auto h1 = project_to_icosphere(c1, s), h2 = project_to_icosphere(c2, s);
        const auto hm = project_to_icosphere(mix, s);
        for (int j = 0; j < 42; ++j) CHECK(hm[j] == doctest::Approx(a * h1[j] + b * h2[j]).epsilon(1e-12));
    }
    SUBCASE("isotropic coefficients give constant amplitudes") {
        const ShCoeffs c{3.0, 0, 0, 0, 0, 0};
        const auto h = project_to_icosphere(c, s);
        for (double v : h) CHECK(v == doctest::Approx(3.0 * kY00).epsilon(1e-12));
    }
}

TEST_CASE("ridge deprojection") {
    const Icosphere s = build_icosphere();
    Rng rng(9);

    SUBCASE("full-sampling roundtrip at tiny lambda") {
        std::vector<int> all(42);
        for (int i = 0; i < 42; ++i) all[i] = i;
        for (int trial = 0; trial < 20; ++trial) {
            const auto c = random_coeffs(rng);
            const auto h = project_to_icosphere(c, s);
            const auto back = deproject_ridge(h, all, s, 1e-12);
            for (int i = 0; i < 6; ++i) CHECK(std::abs(back[i] - c[i]) < 1e-8);
        }
    }
    SUBCASE("lambda -> infinity shrinks to zero") {
        const auto c = random_coeffs(rng);
        std::vector<int> all(42);
        for (int i = 0; i < 42; ++i) all[i] = i;
        const auto shrunk = deproject_ridge(project_to_icosphere(c, s), all, s, 1e12);
        for (int i = 0; i < 6; ++i) CHECK(std::abs(shrunk[i]) < 1e-9);
    }
    SUBCASE("6 well-spread vertices recover noise-free coefficients") {
        // greedy max-min spread in the axial metric (antipodal vertices give
        // identical rows in the even basis, so Euclidean spread would fail)
        std::vector<int> sel{0};
        while (sel.size() < 6) {
            int best = -1;
            double best_d = -1;
            for (int i = 0; i < 42; ++i) {
                if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
                double mind = 1e9;
                for (int j : sel)
                    mind = std::min(mind, 1.0 - std::abs(dot(s.vertices[i], s.vertices[j])));
                if (mind > best_d) {
                    best_d = mind;
                    best = i;
                }
            }
            sel.push_back(best);
        }
        for (int trial = 0; trial < 10; ++trial) {
            const auto c = random_coeffs(rng);
            std::vector<double> h(sel.size());
            for (std::size_t k = 0; k < sel.size(); ++k) h[k] = eval_sh(c, s.vertices[sel[k]]);
            const auto back = deproject_ridge(h, sel, s, 1e-6);
            for (int i = 0; i < 6; ++i) CHECK(std::abs(back[i] - c[i]) < 1e-4);
        }
    }
    SUBCASE("underdetermined selection with lambda=0 raises") {
        const std::vector<int> few{0, 5, 11};
        const std::vector<double> h(3, 1.0);
        CHECK_THROWS_AS(deproject_ridge(h, few, s, 0.0), NumericalError);
    }
    SUBCASE("pseudo-inverse deprojector is a left inverse of projection") {
        const MatX pinv = icosphere_deprojector(s);
        // pinv * P^T = I6
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
                double acc = 0;
                for (int k = 0; k < 42; ++k) acc += pinv(i, k) * s.projection(j, k);
                CHECK(std::abs(acc - (i == j ? 1.0 : 0.0)) < 1e-10);
            }
    }
}

TEST_CASE("low_rank_mix") {
    Rng rng(12);

    SUBCASE("zero factors are the identity") {
        const auto c = random_coeffs(rng);
        const MatX v(6, 2), q(2, 6);
        const auto out = low_rank_mix(c, v, q);
        for (int i = 0; i < 6; ++i) CHECK(out[i] == doctest::Approx(c[i]).epsilon(1e-15));
    }
    SUBCASE("zero coefficients stay zero") {
        MatX v(6, 2), q(2, 6);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 2; ++j) {
                v(i, j) = rng.uniform(-0.025, 0.025);
                q(j, i) = rng.uniform(-0.025, 0.025);
            }
        const auto out = low_rank_mix(ShCoeffs{}, v, q);
        for (int i = 0; i < 6; ++i) CHECK(out[i] == 0.0);
    }
    SUBCASE("perturbation is bounded by the operator norm of VQ") {
        for (int trial = 0; trial < 200; ++trial) {
            MatX v(6, 2), q(2, 6);
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 2; ++j) {
                    v(i, j) = rng.uniform(-0.025, 0.025);
                    q(j, i) = rng.uniform(-0.025, 0.025);
                }
            const auto c = random_coeffs(rng);
            const auto out = low_rank_mix(c, v, q);
            double diff = 0, cn = 0;
            for (int i = 0; i < 6; ++i) {
                diff += (out[i] - c[i]) * (out[i] - c[i]);
                cn += c[i] * c[i];
            }
            // Frobenius norm of VQ bounds the operator norm
            const MatX vq = v * q;
            double frob = 0;
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) frob += vq(i, j) * vq(i, j);
            CHECK(std::sqrt(diff) <= std::sqrt(frob) * std::sqrt(cn) + 1e-12);
        }
    }
}
