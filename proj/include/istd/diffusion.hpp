#pragma once

#include "istd/field.hpp"

namespace istd {

// Per-face conductances discretizing the spatially varying diffusivity.
// horizontal(x,y) couples (x,y)-(x+1,y); vertical(x,y) couples (x,y)-(x,y+1).
// Weights live on undirected faces, so the operator they induce is symmetric.
struct EdgeWeights {
    int width = 0;
    int height = 0;
    std::vector<double> horizontal; // (width-1) * height
    std::vector<double> vertical;   // width * (height-1)

    double& h(int x, int y) { return horizontal[static_cast<std::size_t>(y) * (width - 1) + x]; }
    double h(int x, int y) const {
        return horizontal[static_cast<std::size_t>(y) * (width - 1) + x];
    }
    double& v(int x, int y) { return vertical[static_cast<std::size_t>(y) * width + x]; }
    double v(int x, int y) const { return vertical[static_cast<std::size_t>(y) * width + x]; }
};

// Learnable annotation hyperparameters: edge sensitivity kappa, explicit step
// tau, iteration count, and the diffusion/superpixel blend factor rho.
struct DiffusionParams {
    double kappa = 0.12;
    double tau = 0.225;
    int steps = 40;
    double rho = 0.5;

    void validate() const;
};

// Any conductance is capped at 1, so interior row sums never exceed 4 and
// 1/4 is a stability bound valid for every image. Projecting tau here keeps
// diffuse() stable unconditionally.
inline constexpr double kUniversalStableTau = 0.25;

// w = exp(-((I_p - I_q)/kappa)^2) per face. Fast in flat regions, ~0 across
// strong edges.
EdgeWeights build_edge_weights(const ScalarField& image, double kappa);

// 1 / max_p sum_q w_pq. Using tau <= bound keeps (I - tau*L) nonnegative with
// row sums <= 1 (maximum principle + monotonicity). Infinity for a facelss
// grid.
double stable_step_bound(const EdgeWeights& w);

// Explicit Euler: u <- u - tau * sum_q w_pq (u_p - u_q), `steps` times.
// Zero-flux boundary; mass is conserved by the face-flux formulation.
ScalarField diffuse(const ScalarField& u0, const EdgeWeights& w, double tau, int steps);

struct DiffuseGradients {
    ScalarField grad_u0;
    double grad_kappa = 0.0;
    double grad_tau = 0.0;
};

// Vector-Jacobian product of diffuse() w.r.t. the initial field, kappa
// (through build_edge_weights on w_image) and tau, by reverse traversal of
// the unrolled iteration. steps must be <= kMaxUnrollSteps.
inline constexpr int kMaxUnrollSteps = 64;

DiffuseGradients diffuse_vjp(const ScalarField& u0, const ScalarField& w_image,
                             const DiffusionParams& params, const ScalarField& upstream);

} // namespace istd
