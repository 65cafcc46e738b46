#include "istd/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "istd/parallel.hpp"
#include "istd/rng.hpp"
#include "json.hpp"

namespace istd {

// --- meta network ----------------------------------------------------------

namespace {
// Layout: W1[h][i] (16*4), b1 (16), W2 (16), b2 (1).
constexpr int kMW1 = 0;
constexpr int kMB1 = 64;
constexpr int kMW2 = 80;
constexpr int kMB2 = 96;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
} // namespace

MetaState MetaState::init(uint64_t seed) {
    MetaState s;
    s.params.assign(kMetaParamCount, 0.0);
    s.m.assign(kMetaParamCount, 0.0);
    s.v.assign(kMetaParamCount, 0.0);
    Rng rng(seed);
    const double std1 = std::sqrt(2.0 / 4.0);
    for (int i = kMW1; i < kMB1; ++i) {
        s.params[i] = std1 * rng.normal();
    }
    // W2, b2 stay zero: the net starts as the identity weighting.
    return s;
}

MetaEval meta_forward(const MetaState& phi, const std::vector<SampleFeatures>& feats) {
    if (feats.empty()) {
        throw InvalidParam("meta_forward: empty batch");
    }
    if (phi.params.size() != kMetaParamCount) {
        throw InvalidParam("meta_forward: bad parameter vector");
    }
    const std::size_t B = feats.size();
    MetaEval eval;
    eval.feats = feats;
    eval.z1.resize(B * kMetaHidden);
    eval.raw.resize(B);
    const double* P = phi.params.data();
    for (std::size_t s = 0; s < B; ++s) {
        const double f[4] = {feats[s].loss, feats[s].area_fraction, feats[s].compactness,
                             feats[s].progress};
        double z2 = P[kMB2];
        for (int h = 0; h < kMetaHidden; ++h) {
            double z = P[kMB1 + h];
            for (int i = 0; i < 4; ++i) {
                z += P[kMW1 + h * 4 + i] * f[i];
            }
            eval.z1[s * kMetaHidden + h] = z;
            const double a = z > 0.0 ? z : kLeakySlope * z;
            z2 += P[kMW2 + h] * a;
        }
        eval.raw[s] = 2.0 * sigmoid(z2);
    }
    double mean = 0.0;
    for (double r : eval.raw) {
        mean += r;
    }
    mean /= static_cast<double>(B);
    eval.alpha.resize(B);
    for (std::size_t s = 0; s < B; ++s) {
        eval.alpha[s] = eval.raw[s] / mean;
    }
    return eval;
}

void meta_backward_step(MetaState& phi, const MetaEval& eval, const std::vector<double>& h,
                        double lr) {
    const std::size_t B = eval.raw.size();
    if (h.size() != B) {
        throw ShapeError("meta_backward_step: hypergradient length mismatch");
    }
    double mean = 0.0;
    for (double r : eval.raw) {
        mean += r;
    }
    mean /= static_cast<double>(B);
    double h_dot_alpha = 0.0;
    for (std::size_t s = 0; s < B; ++s) {
        h_dot_alpha += h[s] * eval.alpha[s];
    }
    h_dot_alpha /= static_cast<double>(B);

    std::vector<double> grad(kMetaParamCount, 0.0);
    const double* P = phi.params.data();
    for (std::size_t s = 0; s < B; ++s) {
        // Through alpha = raw/mean(raw), then raw = 2*sigmoid(z2).
        const double draw = (h[s] - h_dot_alpha) / mean;
        const double r = eval.raw[s];
        const double dz2 = draw * r * (1.0 - r / 2.0);
        grad[kMB2] += dz2;
        const double f[4] = {eval.feats[s].loss, eval.feats[s].area_fraction,
                             eval.feats[s].compactness, eval.feats[s].progress};
        for (int hid = 0; hid < kMetaHidden; ++hid) {
            const double z = eval.z1[s * kMetaHidden + hid];
            const double a = z > 0.0 ? z : kLeakySlope * z;
            grad[kMW2 + hid] += dz2 * a;
            const double da = dz2 * P[kMW2 + hid];
            const double dz1 = z > 0.0 ? da : kLeakySlope * da;
            grad[kMB1 + hid] += dz1;
            for (int i = 0; i < 4; ++i) {
                grad[kMW1 + hid * 4 + i] += dz1 * f[i];
            }
        }
    }

    phi.step += 1;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(phi.step));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(phi.step));
    for (int i = 0; i < kMetaParamCount; ++i) {
        phi.m[i] = 0.9 * phi.m[i] + 0.1 * grad[i];
        phi.v[i] = 0.999 * phi.v[i] + 0.001 * grad[i] * grad[i];
        phi.params[i] -= lr * (phi.m[i] / bc1) / (std::sqrt(phi.v[i] / bc2) + 1e-8);
    }
}

// --- batch helpers ----------------------------------------------------------

namespace {

struct SampleEval {
    double loss = 0.0;
    ScalarField grad_pred;
    DetectorTape tape;
    ScalarField prediction;
};

std::vector<SampleEval> eval_batch(const DetectorState& omega,
                                   const std::vector<BatchItem>& batch) {
    std::vector<SampleEval> evals(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
        DetectorForward fwd = detector_forward(omega, *batch[i].image);
        SoftIou iou = soft_iou_loss(fwd.prediction, *batch[i].label);
        evals[i].loss = iou.loss;
        evals[i].grad_pred = std::move(iou.grad_pred);
        evals[i].tape = std::move(fwd.tape);
        evals[i].prediction = std::move(fwd.prediction);
    });
    return evals;
}

std::vector<std::vector<double>> backward_batch(const std::vector<SampleEval>& evals) {
    std::vector<std::vector<double>> grads(evals.size());
    parallel_for(evals.size(), [&](std::size_t i) {
        grads[i] = detector_backward(evals[i].tape, evals[i].grad_pred);
    });
    return grads;
}

// Mean parameter gradient of the val batch at the given parameters.
std::vector<double> val_gradient(const std::vector<double>& params,
                                 const std::vector<BatchItem>& val_batch, double* loss_out) {
    DetectorState probe;
    probe.params = params;
    const auto evals = eval_batch(probe, val_batch);
    const auto grads = backward_batch(evals);
    std::vector<double> mean(kDetectorParamCount, 0.0);
    const double inv = 1.0 / static_cast<double>(val_batch.size());
    for (std::size_t i = 0; i < grads.size(); ++i) {
        for (int j = 0; j < kDetectorParamCount; ++j) {
            mean[j] += grads[i][j] * inv;
        }
    }
    if (loss_out) {
        double l = 0.0;
        for (const auto& e : evals) {
            l += e.loss;
        }
        *loss_out = l * inv;
    }
    return mean;
}

bool finite_vec(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

} // namespace

InnerStepResult inner_step(DetectorState& omega, const std::vector<BatchItem>& batch,
                           const std::vector<double>& alpha, double beta,
                           const std::vector<BatchItem>& val_batch, double lr_omega) {
    if (batch.empty() || alpha.size() != batch.size()) {
        throw InvalidParam("inner_step: batch/alpha size mismatch");
    }
    InnerStepResult res;
    const auto evals = eval_batch(omega, batch);
    res.sample_grads = backward_batch(evals);
    res.sample_loss.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        res.sample_loss[i] = evals[i].loss;
    }
    res.combined.assign(kDetectorParamCount, 0.0);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double a = alpha[i] * inv_b;
        const auto& g = res.sample_grads[i];
        for (int j = 0; j < kDetectorParamCount; ++j) {
            res.combined[j] += a * g[j];
        }
    }
    if (beta != 0.0) {
        if (val_batch.empty()) {
            throw InvalidParam("inner_step: beta > 0 needs a validation batch");
        }
        const auto gv = val_gradient(omega.params, val_batch, &res.val_loss);
        for (int j = 0; j < kDetectorParamCount; ++j) {
            res.combined[j] += beta * gv[j];
        }
    }
    if (!finite_vec(res.combined)) {
        throw DivergenceError("inner_step: non-finite combined gradient");
    }
    adamw_step(omega, res.combined, lr_omega);
    return res;
}

std::vector<double> alpha_hypergradient(const DetectorState& omega,
                                        const std::vector<BatchItem>& batch,
                                        const std::vector<double>& alpha,
                                        const std::vector<BatchItem>& val_batch,
                                        double lr_omega, bool lookahead) {
    if (batch.empty() || alpha.size() != batch.size() || val_batch.empty()) {
        throw InvalidParam("alpha_hypergradient: bad batch");
    }
    const auto evals = eval_batch(omega, batch);
    const auto grads = backward_batch(evals);
    std::vector<double> look = omega.params;
    if (lookahead) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const double a = lr_omega * alpha[i];
            for (int j = 0; j < kDetectorParamCount; ++j) {
                look[j] -= a * grads[i][j];
            }
        }
    }
    const auto gv = val_gradient(look, val_batch, nullptr);
    std::vector<double> h(batch.size(), 0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        double dot = 0.0;
        for (int j = 0; j < kDetectorParamCount; ++j) {
            dot += grads[i][j] * gv[j];
        }
        h[i] = -lr_omega * dot;
    }
    return h;
}

// --- surrogate --------------------------------------------------------------

SurrogateEval surrogate_forward(const ScalarField& prediction, const ScalarField& image,
                                const DiffusionParams& theta, int steps) {
    if (!prediction.same_shape(image)) {
        throw ShapeError("surrogate_forward: shape mismatch");
    }
    SurrogateEval eval;
    const EdgeWeights w = build_edge_weights(image, theta.kappa);
    eval.diffused = diffuse(prediction, w, theta.tau, steps);
    eval.mask = ScalarField(prediction.width(), prediction.height());
    const double rho = theta.rho;
    for (std::size_t i = 0; i < eval.mask.size(); ++i) {
        eval.mask[i] = rho * eval.diffused[i] + (1.0 - rho) * prediction[i];
    }
    return eval;
}

ThetaGrad surrogate_backward(const SurrogateEval& eval, const ScalarField& prediction,
                             const ScalarField& image, const DiffusionParams& theta,
                             const ScalarField& upstream, int steps) {
    ThetaGrad g;
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        g.rho += upstream[i] * (eval.diffused[i] - prediction[i]);
    }
    ScalarField scaled(upstream.width(), upstream.height());
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        scaled[i] = theta.rho * upstream[i];
    }
    DiffusionParams p = theta;
    p.steps = steps;
    const DiffuseGradients dg = diffuse_vjp(prediction, image, p, scaled);
    g.kappa = dg.grad_kappa;
    g.tau = dg.grad_tau;
    return g;
}

double theta_step(DiffusionParams& theta, ThetaOptimizer& opt,
                  const std::vector<ThetaItem>& batch, double lr_theta, int steps) {
    if (batch.empty()) {
        throw InvalidParam("theta_step: empty batch");
    }
    double loss_sum = 0.0;
    ThetaGrad total;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const ThetaItem& item : batch) {
        const SurrogateEval eval = surrogate_forward(*item.prediction, *item.image, theta, steps);
        const SoftIou to_label = soft_iou_loss(eval.mask, *item.label);
        const SoftIou to_pred = soft_iou_loss(eval.mask, *item.prediction);
        loss_sum += to_label.loss + to_pred.loss;
        ScalarField upstream(eval.mask.width(), eval.mask.height());
        for (std::size_t i = 0; i < upstream.size(); ++i) {
            upstream[i] = to_label.grad_pred[i] + to_pred.grad_pred[i];
        }
        const ThetaGrad g = surrogate_backward(eval, *item.prediction, *item.image, theta,
                                               upstream, steps);
        total.kappa += g.kappa * inv_b;
        total.tau += g.tau * inv_b;
        total.rho += g.rho * inv_b;
    }

    // Optimize in (kappa, log tau, logit rho) coordinates.
    const double rho_c = std::clamp(theta.rho, 1e-6, 1.0 - 1e-6);
    double coords[3] = {theta.kappa, std::log(theta.tau), std::log(rho_c / (1.0 - rho_c))};
    const double grads[3] = {total.kappa, total.tau * theta.tau,
                             total.rho * rho_c * (1.0 - rho_c)};
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(opt.step));
    for (int i = 0; i < 3; ++i) {
        opt.m[i] = 0.9 * opt.m[i] + 0.1 * grads[i];
        opt.v[i] = 0.999 * opt.v[i] + 0.001 * grads[i] * grads[i];
        coords[i] -= lr_theta * (opt.m[i] / bc1) / (std::sqrt(opt.v[i] / bc2) + 1e-8);
    }
    theta.kappa = std::max(coords[0], 1e-3);
    theta.tau = std::min(std::exp(coords[1]), kUniversalStableTau);
    theta.rho = sigmoid(std::clamp(coords[2], -12.0, 12.0));
    return loss_sum * inv_b;
}

// --- training loop -----------------------------------------------------------

Ablation ablation_from_string(const std::string& name) {
    if (name == "full" || name == "Full") return Ablation::Full;
    if (name == "A1") return Ablation::A1;
    if (name == "A2") return Ablation::A2;
    if (name == "A3") return Ablation::A3;
    if (name == "A4") return Ablation::A4;
    if (name == "B1") return Ablation::B1;
    if (name == "B2") return Ablation::B2;
    if (name == "B3") return Ablation::B3;
    if (name == "B4") return Ablation::B4;
    throw InvalidParam("unknown ablation: " + name);
}

std::string ablation_name(Ablation a) {
    switch (a) {
    case Ablation::Full: return "full";
    case Ablation::A1: return "A1";
    case Ablation::A2: return "A2";
    case Ablation::A3: return "A3";
    case Ablation::A4: return "A4";
    case Ablation::B1: return "B1";
    case Ablation::B2: return "B2";
    case Ablation::B3: return "B3";
    case Ablation::B4: return "B4";
    }
    return "full";
}

void TrainConfig::validate() const {
    if (total_epochs < 1) {
        throw InvalidParam("TrainConfig: total_epochs must be >= 1");
    }
    if (activation_epoch <= 0 || activation_epoch >= total_epochs) {
        throw InvalidParam("TrainConfig: need 0 < activation_epoch < total_epochs");
    }
    if (theta_period < 1) {
        throw InvalidParam("TrainConfig: theta_period must be >= 1");
    }
    if (beta < 0.0) {
        throw InvalidParam("TrainConfig: beta must be >= 0");
    }
    if (batch_size < 1 || crop < 8) {
        throw InvalidParam("TrainConfig: bad batch/crop size");
    }
    diffusion.validate();
}

namespace {

struct AblationFlags {
    bool outer = true;
    bool use_meta = true;
    bool use_beta = true;
    bool use_theta = true;
    bool regen = true;
    bool lookahead = true;
    int activation = 0;
};

AblationFlags resolve_flags(const TrainConfig& cfg, Ablation abl) {
    AblationFlags f;
    const bool outer = abl == Ablation::Full || abl == Ablation::B1 || abl == Ablation::B2 ||
                       abl == Ablation::B3 || abl == Ablation::B4;
    f.outer = outer;
    f.use_meta = outer && abl != Ablation::B2;
    f.use_beta = outer && abl != Ablation::B4;
    f.use_theta = outer;
    f.regen = outer && abl != Ablation::B3;
    f.lookahead = abl != Ablation::B1;
    f.activation = abl == Ablation::B1 ? 0 : cfg.activation_epoch;
    return f;
}

// Point-supervision-only label for the A1 ablation.
ScalarField point_label(const Sample& s) {
    ScalarField l(s.image.width(), s.image.height());
    for (const PointAnnotation& p : s.points) {
        if (!p.inside(l.width(), l.height())) {
            throw AnnotationError("point label: point outside sample " + s.id);
        }
        l.at(p.x, p.y) = 1.0;
    }
    return l;
}

void annotate_all(std::vector<Sample>& set, const AnnotateOptions& opts, bool point_only) {
    if (point_only) {
        parallel_for(set.size(), [&](std::size_t i) {
            set[i].pseudo_label = point_label(set[i]);
            const LabelStats st = label_stats(set[i].pseudo_label, opts.rel_threshold);
            set[i].label_area_fraction = st.area_fraction;
            set[i].label_compactness = st.compactness;
        });
    } else {
        annotate_dataset(set, opts);
    }
}

// Seeded crop of image+label when the image exceeds the crop size.
struct CropBuf {
    ScalarField image;
    ScalarField label;
};

BatchItem make_item(const Sample& s, int crop, Rng& rng, std::vector<CropBuf>& bufs) {
    if (s.image.width() <= crop && s.image.height() <= crop) {
        return {&s.image, &s.pseudo_label};
    }
    const int cw = std::min(crop, s.image.width());
    const int ch = std::min(crop, s.image.height());
    const int ox = static_cast<int>(rng.below(static_cast<uint64_t>(s.image.width() - cw + 1)));
    const int oy = static_cast<int>(rng.below(static_cast<uint64_t>(s.image.height() - ch + 1)));
    CropBuf buf;
    buf.image = ScalarField(cw, ch);
    buf.label = ScalarField(cw, ch);
    for (int y = 0; y < ch; ++y) {
        for (int x = 0; x < cw; ++x) {
            buf.image.at(x, y) = s.image.at(ox + x, oy + y);
            buf.label.at(x, y) = s.pseudo_label.at(ox + x, oy + y);
        }
    }
    bufs.push_back(std::move(buf));
    return {&bufs.back().image, &bufs.back().label};
}

} // namespace

TrainResult train(const TrainConfig& config, std::vector<Sample> train_set,
                  std::vector<Sample> val_set, Ablation ablation) {
    config.validate();
    if (train_set.empty() || val_set.empty()) {
        throw InvalidParam("train: empty dataset");
    }
    const AblationFlags flags = resolve_flags(config, ablation);

    AnnotateOptions opts;
    opts.diffusion = config.diffusion;
    opts.slic = config.slic;
    opts.rel_threshold = config.rel_threshold;
    if (ablation == Ablation::A2) {
        opts.diffusion.rho = 1.0;
    } else if (ablation == Ablation::A3) {
        opts.diffusion.rho = 0.0;
    }
    const bool point_only = ablation == Ablation::A1;

    annotate_all(train_set, opts, point_only);
    annotate_all(val_set, opts, point_only);

    Rng base(config.seed);
    Rng shuffle_rng = base.fork(1);
    Rng val_rng = base.fork(2);
    Rng crop_rng = base.fork(3);
    Rng theta_rng = base.fork(6);

    DetectorState omega = DetectorState::init(base.fork(4).next_u64());
    MetaState phi = MetaState::init(base.fork(5).next_u64());
    DiffusionParams theta = opts.diffusion;
    ThetaOptimizer theta_opt;

    TrainResult result;
    TrainHistory& hist = result.history;
    hist.activation_epoch = flags.outer ? flags.activation : config.total_epochs;
    hist.alpha_sum.assign(train_set.size(), 0.0);
    hist.alpha_count.assign(train_set.size(), 0);
    for (const Sample& s : train_set) {
        hist.sample_ids.push_back(s.id);
        hist.sample_buckets.push_back(s.bucket);
    }

    DetectorState last_good = omega;
    MetaState last_good_phi = phi;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::size_t> val_order(val_set.size());
    std::iota(val_order.begin(), val_order.end(), 0);
    std::size_t val_cursor = 0;

    auto shuffle = [](std::vector<std::size_t>& idx, Rng& rng) {
        for (std::size_t i = idx.size(); i > 1; --i) {
            const std::size_t j = rng.below(i);
            std::swap(idx[i - 1], idx[j]);
        }
    };

    auto next_val_indices = [&](std::size_t count) {
        std::vector<std::size_t> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            if (val_cursor == 0) {
                shuffle(val_order, val_rng);
            }
            out.push_back(val_order[val_cursor]);
            val_cursor = (val_cursor + 1) % val_order.size();
        }
        return out;
    };

    try {
        for (int epoch = 0; epoch < config.total_epochs; ++epoch) {
            const bool active = flags.outer && epoch >= flags.activation;
            const double progress = static_cast<double>(epoch) / config.total_epochs;
            shuffle(order, shuffle_rng);

            double train_loss_sum = 0.0;
            std::size_t train_loss_count = 0;
            std::map<int, std::pair<double, long long>> bucket_alpha;

            for (std::size_t begin = 0; begin < order.size();
                 begin += static_cast<std::size_t>(config.batch_size)) {
                const std::size_t end =
                    std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
                const std::size_t B = end - begin;

                std::vector<CropBuf> bufs;
                bufs.reserve(B * 2 + 4);
                std::vector<BatchItem> batch;
                std::vector<std::size_t> batch_idx;
                for (std::size_t i = begin; i < end; ++i) {
                    batch_idx.push_back(order[i]);
                    batch.push_back(make_item(train_set[order[i]], config.crop, crop_rng, bufs));
                }

                // Forward first: the meta features need the current losses.
                const auto evals = eval_batch(omega, batch);
                std::vector<double> alpha(B, 1.0);
                MetaEval meta_eval;
                const bool meta_now = active && flags.use_meta;
                if (meta_now) {
                    std::vector<SampleFeatures> feats(B);
                    for (std::size_t i = 0; i < B; ++i) {
                        const Sample& s = train_set[batch_idx[i]];
                        feats[i] = {evals[i].loss, s.label_area_fraction, s.label_compactness,
                                    progress};
                    }
                    meta_eval = meta_forward(phi, feats);
                    alpha = meta_eval.alpha;
                }

                const auto grads = backward_batch(evals);
                std::vector<double> combined(kDetectorParamCount, 0.0);
                const double inv_b = 1.0 / static_cast<double>(B);
                for (std::size_t i = 0; i < B; ++i) {
                    const double a = alpha[i] * inv_b;
                    for (int j = 0; j < kDetectorParamCount; ++j) {
                        combined[j] += a * grads[i][j];
                    }
                }

                std::vector<BatchItem> val_batch;
                const double beta_now = (active && flags.use_beta) ? config.beta : 0.0;
                if (active && (flags.use_beta || flags.use_meta)) {
                    const auto vidx =
                        next_val_indices(std::min<std::size_t>(config.batch_size, val_set.size()));
                    for (const std::size_t vi : vidx) {
                        val_batch.push_back(make_item(val_set[vi], config.crop, crop_rng, bufs));
                    }
                }
                if (beta_now != 0.0) {
                    const auto gv = val_gradient(omega.params, val_batch, nullptr);
                    for (int j = 0; j < kDetectorParamCount; ++j) {
                        combined[j] += beta_now * gv[j];
                    }
                }
                if (!finite_vec(combined)) {
                    throw DivergenceError("train: non-finite gradient at epoch " +
                                          std::to_string(epoch));
                }

                const std::vector<double> snapshot = omega.params;
                adamw_step(omega, combined, config.lr_omega);

                if (meta_now) {
                    // One-step lookahead along the weighted training gradient.
                    std::vector<double> look = snapshot;
                    if (flags.lookahead) {
                        for (std::size_t i = 0; i < B; ++i) {
                            const double a = config.lr_omega * alpha[i];
                            for (int j = 0; j < kDetectorParamCount; ++j) {
                                look[j] -= a * grads[i][j];
                            }
                        }
                    }
                    const auto gv = val_gradient(look, val_batch, nullptr);
                    std::vector<double> h(B, 0.0);
                    for (std::size_t i = 0; i < B; ++i) {
                        double dot = 0.0;
                        for (int j = 0; j < kDetectorParamCount; ++j) {
                            dot += grads[i][j] * gv[j];
                        }
                        h[i] = -config.lr_omega * dot;
                    }
                    meta_backward_step(phi, meta_eval, h, config.lr_phi);
                }

                for (std::size_t i = 0; i < B; ++i) {
                    train_loss_sum += evals[i].loss;
                    ++train_loss_count;
                    const Sample& s = train_set[batch_idx[i]];
                    auto& acc = bucket_alpha[s.bucket];
                    acc.first += alpha[i];
                    acc.second += 1;
                    if (active) {
                        hist.alpha_sum[batch_idx[i]] += alpha[i];
                        hist.alpha_count[batch_idx[i]] += 1;
                    }
                }
            }

            // Theta refinement and label regeneration on the period.
            if (active && flags.use_theta &&
                (epoch - flags.activation) % config.theta_period == 0) {
                std::vector<std::size_t> tidx(train_set.size());
                std::iota(tidx.begin(), tidx.end(), 0);
                shuffle(tidx, theta_rng);
                const std::size_t tb =
                    std::min<std::size_t>(config.batch_size, train_set.size());
                std::vector<CropBuf> bufs;
                bufs.reserve(tb + 1);
                std::vector<ScalarField> preds(tb);
                std::vector<BatchItem> titems;
                for (std::size_t i = 0; i < tb; ++i) {
                    titems.push_back(make_item(train_set[tidx[i]], config.crop, theta_rng, bufs));
                }
                parallel_for(tb, [&](std::size_t i) {
                    preds[i] = detector_forward(omega, *titems[i].image).prediction;
                });
                std::vector<ThetaItem> tbatch;
                for (std::size_t i = 0; i < tb; ++i) {
                    tbatch.push_back({&preds[i], titems[i].label, titems[i].image});
                }
                theta_step(theta, theta_opt, tbatch, config.lr_theta, config.surrogate_steps);
                if (flags.regen) {
                    opts.diffusion = theta;
                    annotate_all(train_set, opts, false);
                    annotate_all(val_set, opts, false);
                }
            }

            // Epoch log: full validation pass.
            std::vector<double> val_losses(val_set.size(), 0.0);
            parallel_for(val_set.size(), [&](std::size_t i) {
                std::vector<CropBuf> unused;
                const Sample& s = val_set[i];
                if (s.image.width() <= config.crop && s.image.height() <= config.crop) {
                    const auto fwd = detector_forward(omega, s.image);
                    val_losses[i] = soft_iou_loss(fwd.prediction, s.pseudo_label).loss;
                } else {
                    // Deterministic corner crop for oversized validation images.
                    ScalarField img(std::min(config.crop, s.image.width()),
                                    std::min(config.crop, s.image.height()));
                    ScalarField lab(img.width(), img.height());
                    for (int y = 0; y < img.height(); ++y) {
                        for (int x = 0; x < img.width(); ++x) {
                            img.at(x, y) = s.image.at(x, y);
                            lab.at(x, y) = s.pseudo_label.at(x, y);
                        }
                    }
                    const auto fwd = detector_forward(omega, img);
                    val_losses[i] = soft_iou_loss(fwd.prediction, lab).loss;
                }
            });
            double val_loss = 0.0;
            for (double l : val_losses) {
                val_loss += l;
            }
            val_loss /= static_cast<double>(val_set.size());

            EpochLog log;
            log.epoch = epoch;
            log.train_loss = train_loss_sum / static_cast<double>(train_loss_count);
            log.val_loss = val_loss;
            log.kappa = theta.kappa;
            log.tau = theta.tau;
            log.rho = theta.rho;
            for (const auto& [bucket, acc] : bucket_alpha) {
                log.mean_alpha_by_bucket[bucket] = acc.first / static_cast<double>(acc.second);
            }
            hist.epochs.push_back(std::move(log));
            hist.completed_epochs = epoch + 1;

            if (omega.all_finite()) {
                last_good = omega;
                last_good_phi = phi;
            }
        }
    } catch (const DivergenceError&) {
        if (!config.checkpoint_dir.empty()) {
            std::filesystem::create_directories(config.checkpoint_dir);
            save_checkpoint((std::filesystem::path(config.checkpoint_dir) /
                             "last_finite.dckp").string(),
                            last_good);
        }
        throw;
    }

    result.detector = std::move(omega);
    result.meta = std::move(phi);
    result.theta = theta;
    return result;
}

std::vector<RankedSample> rank_samples_by_alpha(const TrainHistory& history) {
    bool any = false;
    for (const long long c : history.alpha_count) {
        if (c > 0) {
            any = true;
            break;
        }
    }
    if (!any || history.completed_epochs <= history.activation_epoch) {
        throw NotReady("rank_samples_by_alpha: training has not passed the activation epoch");
    }
    std::vector<RankedSample> out;
    out.reserve(history.sample_ids.size());
    for (std::size_t i = 0; i < history.sample_ids.size(); ++i) {
        RankedSample r;
        r.index = i;
        r.id = history.sample_ids[i];
        r.mean_alpha = history.alpha_count[i] > 0
                           ? history.alpha_sum[i] / static_cast<double>(history.alpha_count[i])
                           : 0.0;
        out.push_back(std::move(r));
    }
    std::stable_sort(out.begin(), out.end(), [](const RankedSample& a, const RankedSample& b) {
        return a.mean_alpha > b.mean_alpha;
    });
    return out;
}

void write_history_jsonl(const std::string& path, const TrainHistory& history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IngestError(path + ": cannot open for writing");
    }
    for (const EpochLog& log : history.epochs) {
        nlohmann::json j;
        j["epoch"] = log.epoch;
        j["train_loss"] = log.train_loss;
        j["val_loss"] = log.val_loss;
        j["kappa"] = log.kappa;
        j["tau"] = log.tau;
        j["rho"] = log.rho;
        nlohmann::json buckets;
        for (const auto& [bucket, mean] : log.mean_alpha_by_bucket) {
            buckets[std::to_string(bucket)] = mean;
        }
        j["mean_alpha"] = buckets;
        out << j.dump() << "\n";
    }
}

double evaluate_soft_iou(const DetectorState& detector, const std::vector<Sample>& samples) {
    std::vector<double> scores(samples.size(), -1.0);
    parallel_for(samples.size(), [&](std::size_t i) {
        if (!samples[i].has_gt) {
            return;
        }
        const auto fwd = detector_forward(detector, samples[i].image);
        scores[i] = 1.0 - soft_iou_loss(fwd.prediction, samples[i].gt_mask.as_field()).loss;
    });
    double sum = 0.0;
    std::size_t n = 0;
    for (double s : scores) {
        if (s >= 0.0) {
            sum += s;
            ++n;
        }
    }
    if (n == 0) {
        throw InvalidParam("evaluate_soft_iou: no ground truth in the set");
    }
    return sum / static_cast<double>(n);
}

} // namespace istd
