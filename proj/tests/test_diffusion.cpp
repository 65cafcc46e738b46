#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "istd/diffusion.hpp"
#include "istd/rng.hpp"

using namespace istd;

namespace {

EdgeWeights uniform_weights(int w, int h) {
    return build_edge_weights(ScalarField(w, h, 0.5), 0.1);
}

ScalarField random_image(int w, int h, Rng& rng) {
    ScalarField f(w, h);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = rng.uniform();
    }
    return f;
}

ScalarField two_tone(int w, int h) {
    ScalarField f(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            f.at(x, y) = x < w / 2 ? 0.0 : 1.0;
        }
    }
    return f;
}

bool close_rel(double a, double b, double tol) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return std::abs(a - b) <= tol * scale + 1e-12;
}

} // namespace

TEST_CASE("build_edge_weights on a uniform image is all ones") {
    const EdgeWeights w = uniform_weights(5, 4);
    for (double v : w.horizontal) {
        CHECK(v == 1.0);
    }
    for (double v : w.vertical) {
        CHECK(v == 1.0);
    }
}

TEST_CASE("build_edge_weights at |dI| == kappa gives exp(-1)") {
    ScalarField f(2, 1, {0.3, 0.3 + 0.12});
    const EdgeWeights w = build_edge_weights(f, 0.12);
    CHECK(w.horizontal[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("build_edge_weights two-tone boundary is blocked") {
    const EdgeWeights w = build_edge_weights(two_tone(8, 4), 0.1);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x + 1 < 8; ++x) {
            if (x == 3) {
                CHECK(w.h(x, y) == doctest::Approx(std::exp(-100.0)));
            } else {
                CHECK(w.h(x, y) == 1.0);
            }
        }
    }
    for (double v : w.vertical) {
        CHECK(v == 1.0);
    }
}

TEST_CASE("build_edge_weights rejects non-positive kappa") {
    CHECK_THROWS_AS(build_edge_weights(ScalarField(3, 3), 0.0), InvalidParam);
    CHECK_THROWS_AS(build_edge_weights(ScalarField(3, 3), -1.0), InvalidParam);
}

TEST_CASE("stable_step_bound uniform grid is 1/4") {
    CHECK(stable_step_bound(uniform_weights(3, 3)) == 0.25);
    CHECK(stable_step_bound(uniform_weights(9, 7)) == 0.25);
}

TEST_CASE("stable_step_bound on a line is 1/2") {
    CHECK(stable_step_bound(uniform_weights(8, 1)) == 0.5);
    CHECK(stable_step_bound(uniform_weights(1, 6)) == 0.5);
}

TEST_CASE("stable_step_bound matches a dense Laplacian assembly oracle") {
    Rng rng(123);
    for (int trial = 0; trial < 5; ++trial) {
        const int W = 8, H = 8;
        EdgeWeights w;
        w.width = W;
        w.height = H;
        w.horizontal.resize(static_cast<std::size_t>(W - 1) * H);
        w.vertical.resize(static_cast<std::size_t>(W) * (H - 1));
        for (auto& v : w.horizontal) {
            v = rng.uniform(0.05, 1.0);
        }
        for (auto& v : w.vertical) {
            v = rng.uniform(0.05, 1.0);
        }
        // Oracle: assemble the dense Laplacian and take 1/max diagonal
        // (row sums of |off-diagonal| equal the diagonal by construction).
        std::vector<std::vector<double>> L(W * H, std::vector<double>(W * H, 0.0));
        auto idx = [&](int x, int y) { return y * W + x; };
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x + 1 < W; ++x) {
                const double v = w.h(x, y);
                L[idx(x, y)][idx(x, y)] += v;
                L[idx(x + 1, y)][idx(x + 1, y)] += v;
                L[idx(x, y)][idx(x + 1, y)] -= v;
                L[idx(x + 1, y)][idx(x, y)] -= v;
            }
        }
        for (int y = 0; y + 1 < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double v = w.v(x, y);
                L[idx(x, y)][idx(x, y)] += v;
                L[idx(x, y + 1)][idx(x, y + 1)] += v;
                L[idx(x, y)][idx(x, y + 1)] -= v;
                L[idx(x, y + 1)][idx(x, y)] -= v;
            }
        }
        double max_diag = 0.0;
        for (int i = 0; i < W * H; ++i) {
            max_diag = std::max(max_diag, L[i][i]);
        }
        CHECK(stable_step_bound(w) == doctest::Approx(1.0 / max_diag).epsilon(1e-12));
    }
}

TEST_CASE("diffuse with zero steps is the identity") {
    Rng rng(5);
    const ScalarField u0 = random_image(6, 5, rng);
    const ScalarField out = diffuse(u0, uniform_weights(6, 5), 0.2, 0);
    for (std::size_t i = 0; i < u0.size(); ++i) {
        CHECK(out[i] == u0[i]);
    }
}

TEST_CASE("diffuse single stencil application on 3x3") {
    ScalarField u0(3, 3);
    u0.at(1, 1) = 1.0;
    const ScalarField out = diffuse(u0, uniform_weights(3, 3), 0.2, 1);
    CHECK(out.at(1, 1) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(out.at(0, 1) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(out.at(2, 1) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(out.at(1, 0) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(out.at(1, 2) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(out.at(0, 0) == 0.0);
    CHECK(out.at(2, 2) == 0.0);
    CHECK(out.sum() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("diffuse matches the K-fold self-convolution of the one-step kernel") {
    // Free-space oracle: apply the explicit 5-point kernel on a grid large
    // enough that the support never reaches the border. The reflected mass
    // missing from the oracle is far below the tolerance.
    const int K = 50;
    const double tau = 0.2;
    const int N = 65;
    const int pad = N + 2 * K;
    std::vector<double> cur(static_cast<std::size_t>(pad) * pad, 0.0);
    std::vector<double> next(cur.size(), 0.0);
    const int c = pad / 2;
    cur[static_cast<std::size_t>(c) * pad + c] = 1.0;
    for (int k = 0; k < K; ++k) {
        for (int y = 1; y < pad - 1; ++y) {
            for (int x = 1; x < pad - 1; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * pad + x;
                next[i] = (1.0 - 4.0 * tau) * cur[i] +
                          tau * (cur[i - 1] + cur[i + 1] + cur[i - pad] + cur[i + pad]);
            }
        }
        std::swap(cur, next);
    }

    ScalarField u0(N, N);
    u0.at(N / 2, N / 2) = 1.0;
    const ScalarField out = diffuse(u0, uniform_weights(N, N), tau, K);
    double max_abs = 0.0;
    for (int y = 0; y < N; ++y) {
        for (int x = 0; x < N; ++x) {
            const std::size_t oi =
                static_cast<std::size_t>(y + c - N / 2) * pad + (x + c - N / 2);
            max_abs = std::max(max_abs, std::abs(out.at(x, y) - cur[oi]));
        }
    }
    CHECK(max_abs <= 1e-10);
}

TEST_CASE("diffuse rejects unstable steps and shape mismatches") {
    const EdgeWeights w = uniform_weights(4, 4);
    const ScalarField u0(4, 4, 1.0);
    CHECK_THROWS_AS(diffuse(u0, w, 0.26, 3), UnstableStep);
    CHECK_THROWS_AS(diffuse(u0, w, 0.0, 3), UnstableStep);
    CHECK_THROWS_AS(diffuse(u0, w, -0.1, 3), UnstableStep);
    CHECK_THROWS_AS(diffuse(ScalarField(5, 4), w, 0.2, 3), ShapeError);
    CHECK_NOTHROW(diffuse(u0, w, 0.25, 3)); // bound inclusive
}

TEST_CASE("mass conservation and maximum principle on random instances") {
    Rng rng(2024);
    for (int seed = 0; seed < 20; ++seed) {
        Rng r = rng.fork(seed);
        const ScalarField img = random_image(16, 12, r);
        const EdgeWeights w = build_edge_weights(img, r.uniform(0.05, 0.5));
        ScalarField u0 = random_image(16, 12, r);
        const double tau = r.uniform(0.01, 1.0) * stable_step_bound(w);
        const ScalarField out = diffuse(u0, w, tau, 30);
        double abs_mass = 0.0;
        for (std::size_t i = 0; i < u0.size(); ++i) {
            abs_mass += std::abs(u0[i]);
        }
        CHECK(std::abs(out.sum() - u0.sum()) <= 1e-9 * abs_mass);
        CHECK(out.min() >= u0.min() - 1e-12);
        CHECK(out.max() <= u0.max() + 1e-12);
    }
}

TEST_CASE("monotone spreading: source value non-increasing in K") {
    ScalarField u0(21, 21);
    u0.at(10, 10) = 1.0;
    const EdgeWeights w = uniform_weights(21, 21);
    double prev = 1.0;
    for (int K = 1; K <= 12; ++K) {
        const double v = diffuse(u0, w, 0.2, K).at(10, 10);
        CHECK(v <= prev + 1e-15);
        prev = v;
    }
}

TEST_CASE("heat-kernel variance equals 2 tau K before boundary contact") {
    ScalarField u0(65, 65);
    u0.at(32, 32) = 1.0;
    const EdgeWeights w = uniform_weights(65, 65);
    for (const auto& [tau, K] : {std::pair{0.2, 20}, {0.25, 30}, {0.15, 40}}) {
        const ScalarField out = diffuse(u0, w, tau, K);
        double var_x = 0.0, var_y = 0.0, mass = 0.0;
        for (int y = 0; y < 65; ++y) {
            for (int x = 0; x < 65; ++x) {
                const double v = out.at(x, y);
                mass += v;
                var_x += v * (x - 32.0) * (x - 32.0);
                var_y += v * (y - 32.0) * (y - 32.0);
            }
        }
        const double expected = 2.0 * tau * K;
        CHECK(var_x / mass == doctest::Approx(expected).epsilon(0.01));
        CHECK(var_y / mass == doctest::Approx(expected).epsilon(0.01));
    }
}

TEST_CASE("edge blocking keeps mass on the source side of a hard edge") {
    const int W = 32, H = 16;
    const EdgeWeights w = build_edge_weights(two_tone(W, H), 0.05);
    ScalarField u0(W, H);
    u0.at(7, 8) = 1.0;
    const ScalarField out = diffuse(u0, w, 0.9 * stable_step_bound(w), 100);
    double right = 0.0;
    for (int y = 0; y < H; ++y) {
        for (int x = W / 2; x < W; ++x) {
            right += out.at(x, y);
        }
    }
    CHECK(right <= 1e-6 * out.sum());
}

TEST_CASE("diffuse_vjp zero steps passes upstream through") {
    Rng rng(3);
    const ScalarField img = random_image(5, 5, rng);
    const ScalarField u0 = random_image(5, 5, rng);
    const ScalarField up = random_image(5, 5, rng);
    DiffusionParams p;
    p.steps = 0;
    const DiffuseGradients g = diffuse_vjp(u0, img, p, up);
    for (std::size_t i = 0; i < up.size(); ++i) {
        CHECK(g.grad_u0[i] == up[i]);
    }
    CHECK(g.grad_kappa == 0.0);
    CHECK(g.grad_tau == 0.0);
}

TEST_CASE("diffuse_vjp kappa gradient vanishes on a uniform image") {
    Rng rng(4);
    const ScalarField img(6, 6, 0.4);
    const ScalarField u0 = random_image(6, 6, rng);
    const ScalarField up = random_image(6, 6, rng);
    DiffusionParams p;
    p.steps = 8;
    p.tau = 0.2;
    const DiffuseGradients g = diffuse_vjp(u0, img, p, up);
    CHECK(g.grad_kappa == 0.0);
}

TEST_CASE("diffuse_vjp enforces the unroll limit") {
    DiffusionParams p;
    p.steps = 65;
    CHECK_THROWS_AS(diffuse_vjp(ScalarField(4, 4), ScalarField(4, 4), p, ScalarField(4, 4)),
                    InvalidParam);
}

TEST_CASE("diffuse_vjp matches central finite differences") {
    Rng base(77);
    for (int seed = 0; seed < 6; ++seed) {
        Rng rng = base.fork(seed);
        const int W = 8, H = 8;
        const ScalarField img = random_image(W, H, rng);
        const ScalarField u0 = random_image(W, H, rng);
        const ScalarField up = random_image(W, H, rng);
        DiffusionParams p;
        p.kappa = rng.uniform(0.08, 0.3);
        p.tau = rng.uniform(0.05, 0.2);
        p.steps = 6;

        auto loss = [&](const ScalarField& u, double kappa, double tau) {
            DiffusionParams q = p;
            q.kappa = kappa;
            q.tau = tau;
            const ScalarField out = diffuse(u, build_edge_weights(img, kappa), tau, q.steps);
            double acc = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) {
                acc += up[i] * out[i];
            }
            return acc;
        };

        const DiffuseGradients g = diffuse_vjp(u0, img, p, up);
        const double eps = 1e-6;

        for (const std::size_t i : {std::size_t{0}, std::size_t{27}, std::size_t{63}}) {
            ScalarField lo = u0, hi = u0;
            lo[i] -= eps;
            hi[i] += eps;
            const double fd = (loss(hi, p.kappa, p.tau) - loss(lo, p.kappa, p.tau)) / (2 * eps);
            CHECK(close_rel(fd, g.grad_u0[i], 1e-5));
        }
        const double fd_kappa =
            (loss(u0, p.kappa + eps, p.tau) - loss(u0, p.kappa - eps, p.tau)) / (2 * eps);
        CHECK(close_rel(fd_kappa, g.grad_kappa, 1e-5));
        const double fd_tau =
            (loss(u0, p.kappa, p.tau + eps) - loss(u0, p.kappa, p.tau - eps)) / (2 * eps);
        CHECK(close_rel(fd_tau, g.grad_tau, 1e-5));
    }
}
