#pragma once

#include <map>
#include <optional>
#include <string>

#include "istd/annotator.hpp"
#include "istd/datakit.hpp"
#include "istd/diffusion.hpp"
#include "istd/model.hpp"

namespace istd {

// --- sample weighting ----------------------------------------------------

// Inputs to the weighting network, one row per sample.
struct SampleFeatures {
    double loss = 0.0;          // current training loss of the sample
    double area_fraction = 0.0; // pseudo-label area fraction
    double compactness = 0.0;   // 4*pi*area/perimeter^2 of the label
    double progress = 0.0;      // epoch / total epochs
};

// 2-layer perceptron 4 -> 16 -> 1, leaky hidden units, logistic output
// scaled by 2, so raw weights live in (0,2). 97 parameters. The final layer
// starts at zero: the net begins as the identity weighting (alpha = 1).
inline constexpr int kMetaParamCount = 97;
inline constexpr int kMetaHidden = 16;

struct MetaState {
    std::vector<double> params;
    std::vector<double> m, v; // Adam moments
    uint64_t step = 0;

    static MetaState init(uint64_t seed);
};

// Forward evaluation plus everything the backward pass needs.
struct MetaEval {
    std::vector<SampleFeatures> feats;
    std::vector<double> z1;    // batch * kMetaHidden pre-activations
    std::vector<double> raw;   // 2*logistic(z2), in (0,2)
    std::vector<double> alpha; // raw / mean(raw); mean is exactly 1
};

// Raw per-sample weights normalized to batch mean 1.
MetaEval meta_forward(const MetaState& phi, const std::vector<SampleFeatures>& feats);

// Backpropagates d loss / d alpha through the mean normalization and the
// perceptron, then applies one Adam step at lr.
void meta_backward_step(MetaState& phi, const MetaEval& eval, const std::vector<double>& h,
                        double lr);

// --- inner / outer updates ------------------------------------------------

struct BatchItem {
    const ScalarField* image = nullptr;
    const ScalarField* label = nullptr;
};

struct InnerStepResult {
    std::vector<double> sample_loss;
    std::vector<std::vector<double>> sample_grads; // per-sample d L_tr / d omega
    std::vector<double> combined;                  // gradient the optimizer consumed
    double val_loss = 0.0;                         // mean over the val batch (if used)
};

// AdamW step on sum_i alpha_i g_i / B + beta * mean val gradient. Before the
// activation epoch callers pass beta = 0 and alpha = 1.
InnerStepResult inner_step(DetectorState& omega, const std::vector<BatchItem>& batch,
                           const std::vector<double>& alpha, double beta,
                           const std::vector<BatchItem>& val_batch, double lr_omega);

// One-step hypergradients h_i = -lr * <g_i, g_val(omega+)> where
// omega+ = omega - lr * sum_i alpha_i g_i. With lookahead disabled the val
// gradient is taken at omega itself.
std::vector<double> alpha_hypergradient(const DetectorState& omega,
                                        const std::vector<BatchItem>& batch,
                                        const std::vector<double>& alpha,
                                        const std::vector<BatchItem>& val_batch,
                                        double lr_omega, bool lookahead = true);

// --- differentiable diffusion surrogate -----------------------------------

inline constexpr int kSurrogateSteps = 5;

struct SurrogateEval {
    ScalarField mask;     // M = rho * diffuse(y) + (1-rho) * y
    ScalarField diffused; // diffuse(y), kept for the backward pass
};

SurrogateEval surrogate_forward(const ScalarField& prediction, const ScalarField& image,
                                const DiffusionParams& theta, int steps = kSurrogateSteps);

struct ThetaGrad {
    double kappa = 0.0;
    double tau = 0.0;
    double rho = 0.0;
};

// d loss / d {kappa, tau, rho} given d loss / d M.
ThetaGrad surrogate_backward(const SurrogateEval& eval, const ScalarField& prediction,
                             const ScalarField& image, const DiffusionParams& theta,
                             const ScalarField& upstream, int steps = kSurrogateSteps);

struct ThetaItem {
    const ScalarField* prediction = nullptr;
    const ScalarField* label = nullptr; // current pseudo-label
    const ScalarField* image = nullptr;
};

struct ThetaOptimizer {
    double m[3] = {0, 0, 0};
    double v[3] = {0, 0, 0};
    uint64_t step = 0;
};

// One Adam step on the surrogate alignment loss
//   soft_iou(M, label) + soft_iou(M, prediction)
// averaged over the batch. tau is learned in log space and rho in logit
// space; afterwards kappa >= 1e-3, tau <= the universal stable bound and
// rho in (0,1) by construction. Returns the pre-step alignment loss.
double theta_step(DiffusionParams& theta, ThetaOptimizer& opt,
                  const std::vector<ThetaItem>& batch, double lr_theta,
                  int steps = kSurrogateSteps);

// --- training loop ---------------------------------------------------------

enum class Ablation { Full, A1, A2, A3, A4, B1, B2, B3, B4 };

Ablation ablation_from_string(const std::string& name);
std::string ablation_name(Ablation a);

struct TrainConfig {
    int total_epochs = 400;
    int activation_epoch = 80;
    int theta_period = 20;
    double beta = 0.5;
    double lr_omega = 1e-3;
    double lr_phi = 1e-3;
    double lr_theta = 1e-2;
    int batch_size = 16;
    int crop = 256;
    uint64_t seed = 0;
    DiffusionParams diffusion; // initial theta
    SlicParams slic;
    double rel_threshold = 0.3;
    int surrogate_steps = kSurrogateSteps;
    std::string checkpoint_dir; // last finite state lands here on divergence

    void validate() const;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double kappa = 0.0;
    double tau = 0.0;
    double rho = 0.0;
    std::map<int, double> mean_alpha_by_bucket;
};

struct TrainHistory {
    std::vector<EpochLog> epochs;
    std::vector<std::string> sample_ids;
    std::vector<int> sample_buckets;
    std::vector<double> alpha_sum;   // per sample, post-activation
    std::vector<long long> alpha_count;
    int activation_epoch = 0;
    int completed_epochs = 0;
};

struct TrainResult {
    DetectorState detector;
    MetaState meta;
    DiffusionParams theta;
    TrainHistory history;
};

// Single-loop bi-level schedule: pseudo-labels generated at epoch 0 with the
// initial theta; plain weighted steps until the activation epoch; afterwards
// meta-weighted inner steps with the validation blend, a hypergradient step
// for phi every batch, and a theta step (followed by label regeneration)
// every theta_period epochs. Fully deterministic given the seed.
TrainResult train(const TrainConfig& config, std::vector<Sample> train_set,
                  std::vector<Sample> val_set, Ablation ablation = Ablation::Full);

struct RankedSample {
    std::size_t index = 0;
    std::string id;
    double mean_alpha = 0.0;
};

// Samples sorted by descending time-averaged alpha over post-activation
// epochs; ties keep dataset order. Throws NotReady if training never
// activated the outer level.
std::vector<RankedSample> rank_samples_by_alpha(const TrainHistory& history);

// Line-delimited JSON, one object per epoch.
void write_history_jsonl(const std::string& path, const TrainHistory& history);

// Mean soft-IoU (1 - loss) of detector predictions against ground truth.
double evaluate_soft_iou(const DetectorState& detector, const std::vector<Sample>& samples);

} // namespace istd
