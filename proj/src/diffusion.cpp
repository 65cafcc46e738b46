#include "istd/diffusion.hpp"

#include <cmath>
#include <limits>

namespace istd {

void DiffusionParams::validate() const {
    if (!(kappa > 0.0)) {
        throw InvalidParam("DiffusionParams: kappa must be > 0");
    }
    if (!(tau > 0.0)) {
        throw UnstableStep("DiffusionParams: tau must be > 0");
    }
    if (steps < 0) {
        throw InvalidParam("DiffusionParams: steps must be >= 0");
    }
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw InvalidParam("DiffusionParams: rho must be in [0,1]");
    }
}

EdgeWeights build_edge_weights(const ScalarField& image, double kappa) {
    if (!(kappa > 0.0)) {
        throw InvalidParam("build_edge_weights: kappa must be > 0");
    }
    if (!image.all_finite()) {
        throw InvalidField("build_edge_weights: non-finite image");
    }
    const int w = image.width();
    const int h = image.height();
    EdgeWeights out;
    out.width = w;
    out.height = h;
    out.horizontal.resize(static_cast<std::size_t>(w - 1) * h);
    out.vertical.resize(static_cast<std::size_t>(w) * (h - 1));
    const double inv_k = 1.0 / kappa;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x + 1 < w; ++x) {
            const double d = (image.at(x, y) - image.at(x + 1, y)) * inv_k;
            out.h(x, y) = std::exp(-d * d);
        }
    }
    for (int y = 0; y + 1 < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double d = (image.at(x, y) - image.at(x, y + 1)) * inv_k;
            out.v(x, y) = std::exp(-d * d);
        }
    }
    return out;
}

double stable_step_bound(const EdgeWeights& w) {
    const int W = w.width;
    const int H = w.height;
    double max_row = 0.0;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            double row = 0.0;
            if (x > 0) {
                row += w.h(x - 1, y);
            }
            if (x + 1 < W) {
                row += w.h(x, y);
            }
            if (y > 0) {
                row += w.v(x, y - 1);
            }
            if (y + 1 < H) {
                row += w.v(x, y);
            }
            if (row > max_row) {
                max_row = row;
            }
        }
    }
    if (max_row == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 1.0 / max_row;
}

namespace {

void check_diffuse_args(const ScalarField& u0, const EdgeWeights& w, double tau, int steps) {
    if (u0.width() != w.width || u0.height() != w.height) {
        throw ShapeError("diffuse: field/weight shape mismatch");
    }
    if (!u0.all_finite()) {
        throw InvalidField("diffuse: non-finite field");
    }
    if (steps < 0) {
        throw InvalidParam("diffuse: steps must be >= 0");
    }
    if (!(tau > 0.0) || tau > stable_step_bound(w)) {
        throw UnstableStep("diffuse: tau outside (0, stable_step_bound]");
    }
}

// One Jacobi step of u' = (I - tau*L) u via face fluxes. src and dst must
// differ.
void diffuse_step(const ScalarField& src, ScalarField& dst, const EdgeWeights& w, double tau) {
    const int W = src.width();
    const int H = src.height();
    dst.data() = src.data();
    for (int y = 0; y < H; ++y) {
        const double* u = src.data().data() + static_cast<std::size_t>(y) * W;
        double* d = dst.data().data() + static_cast<std::size_t>(y) * W;
        const double* wh = w.horizontal.data() + static_cast<std::size_t>(y) * (W - 1);
        for (int x = 0; x + 1 < W; ++x) {
            const double f = tau * wh[x] * (u[x] - u[x + 1]);
            d[x] -= f;
            d[x + 1] += f;
        }
    }
    for (int y = 0; y + 1 < H; ++y) {
        const double* u0row = src.data().data() + static_cast<std::size_t>(y) * W;
        const double* u1row = u0row + W;
        double* d0 = dst.data().data() + static_cast<std::size_t>(y) * W;
        double* d1 = d0 + W;
        const double* wv = w.vertical.data() + static_cast<std::size_t>(y) * W;
        for (int x = 0; x < W; ++x) {
            const double f = tau * wv[x] * (u0row[x] - u1row[x]);
            d0[x] -= f;
            d1[x] += f;
        }
    }
}

} // namespace

ScalarField diffuse(const ScalarField& u0, const EdgeWeights& w, double tau, int steps) {
    check_diffuse_args(u0, w, tau, steps);
    ScalarField cur = u0;
    ScalarField next(u0.width(), u0.height());
    for (int k = 0; k < steps; ++k) {
        diffuse_step(cur, next, w, tau);
        std::swap(cur, next);
    }
    return cur;
}

DiffuseGradients diffuse_vjp(const ScalarField& u0, const ScalarField& w_image,
                             const DiffusionParams& params, const ScalarField& upstream) {
    if (!u0.same_shape(w_image) || !u0.same_shape(upstream)) {
        throw ShapeError("diffuse_vjp: shape mismatch");
    }
    if (params.steps > kMaxUnrollSteps) {
        throw InvalidParam("diffuse_vjp: steps exceed unroll limit");
    }
    const EdgeWeights w = build_edge_weights(w_image, params.kappa);
    check_diffuse_args(u0, w, params.tau, params.steps);

    const int W = u0.width();
    const int H = u0.height();
    const int K = params.steps;
    const double tau = params.tau;

    // Forward tape: u^0 .. u^{K-1} are needed by the reverse sweep.
    std::vector<ScalarField> tape;
    tape.reserve(static_cast<std::size_t>(K) + 1);
    tape.push_back(u0);
    ScalarField next(W, H);
    for (int k = 0; k < K; ++k) {
        diffuse_step(tape.back(), next, w, tau);
        tape.push_back(next);
    }

    DiffuseGradients g;
    g.grad_u0 = upstream;
    if (K == 0) {
        return g;
    }

    std::vector<double> grad_wh(w.horizontal.size(), 0.0);
    std::vector<double> grad_wv(w.vertical.size(), 0.0);
    ScalarField ubar = upstream;
    ScalarField ubar_next(W, H);

    for (int k = K - 1; k >= 0; --k) {
        const ScalarField& uk = tape[static_cast<std::size_t>(k)];
        // d u^{k+1} / d tau = -L u^k; accumulate <ubar, -L u^k> plus the
        // per-face weight gradient -tau (u_p - u_q)(ubar_p - ubar_q).
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x + 1 < W; ++x) {
                const double du = uk.at(x, y) - uk.at(x + 1, y);
                const double db = ubar.at(x, y) - ubar.at(x + 1, y);
                g.grad_tau -= w.h(x, y) * du * db;
                grad_wh[static_cast<std::size_t>(y) * (W - 1) + x] -= tau * du * db;
            }
        }
        for (int y = 0; y + 1 < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double du = uk.at(x, y) - uk.at(x, y + 1);
                const double db = ubar.at(x, y) - ubar.at(x, y + 1);
                g.grad_tau -= w.v(x, y) * du * db;
                grad_wv[static_cast<std::size_t>(y) * W + x] -= tau * du * db;
            }
        }
        // (I - tau*L) is symmetric, so the adjoint step reuses the forward
        // stencil on ubar.
        diffuse_step(ubar, ubar_next, w, tau);
        std::swap(ubar, ubar_next);
    }
    g.grad_u0 = ubar;

    // Chain into kappa: dw/dkappa = w * 2 (dI)^2 / kappa^3.
    const double inv_k3 = 1.0 / (params.kappa * params.kappa * params.kappa);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x + 1 < W; ++x) {
            const double di = w_image.at(x, y) - w_image.at(x + 1, y);
            g.grad_kappa += grad_wh[static_cast<std::size_t>(y) * (W - 1) + x] * w.h(x, y) *
                            2.0 * di * di * inv_k3;
        }
    }
    for (int y = 0; y + 1 < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double di = w_image.at(x, y) - w_image.at(x, y + 1);
            g.grad_kappa += grad_wv[static_cast<std::size_t>(y) * W + x] * w.v(x, y) *
                            2.0 * di * di * inv_k3;
        }
    }
    return g;
}

} // namespace istd
