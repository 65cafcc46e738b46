#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "istd/bilevel.hpp"
#include "istd/rng.hpp"

using namespace istd;

namespace {

ScalarField random_image(int w, int h, Rng& rng, double lo = 0.0, double hi = 1.0) {
    ScalarField f(w, h);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = rng.uniform(lo, hi);
    }
    return f;
}

bool close_rel(double a, double b, double tol) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return std::abs(a - b) <= tol * scale + 1e-12;
}

std::vector<Sample> toy_set(int n, uint64_t seed, int size = 32) {
    SceneSpec spec;
    spec.width = size;
    spec.height = size;
    spec.seed = seed;
    spec.min_targets = 1;
    spec.max_targets = size < 32 ? 1 : 2;
    spec.sigma_hi = 2.5; // leave placement room on tiny frames
    return synth_dataset(spec, n);
}

} // namespace

TEST_CASE("meta_forward with zero parameters weights everything 1") {
    MetaState phi;
    phi.params.assign(kMetaParamCount, 0.0);
    phi.m.assign(kMetaParamCount, 0.0);
    phi.v.assign(kMetaParamCount, 0.0);
    const std::vector<SampleFeatures> feats{{0.4, 0.1, 0.5, 0.2}, {0.9, 0.02, 0.9, 0.2}};
    const MetaEval eval = meta_forward(phi, feats);
    for (const double r : eval.raw) {
        CHECK(r == 1.0);
    }
    for (const double a : eval.alpha) {
        CHECK(a == 1.0);
    }
}

TEST_CASE("meta_forward normalizes identical features to 1") {
    const MetaState phi = MetaState::init(3);
    const std::vector<SampleFeatures> feats(5, SampleFeatures{0.3, 0.01, 0.6, 0.5});
    const MetaEval eval = meta_forward(phi, feats);
    for (const double a : eval.alpha) {
        CHECK(a == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("meta_forward batch of two with raw outputs (0.5, 1.5)") {
    // W1 row 0 routes the loss feature, W2 picks hidden 0; leaky keeps the
    // negative branch at slope 0.1. raw = 2*sigmoid(+-ln 3) = (1.5, 0.5).
    MetaState phi;
    phi.params.assign(kMetaParamCount, 0.0);
    phi.m.assign(kMetaParamCount, 0.0);
    phi.v.assign(kMetaParamCount, 0.0);
    phi.params[0] = 1.0;  // W1[0][0]
    phi.params[80] = 1.0; // W2[0]
    const double z = std::log(3.0);
    const std::vector<SampleFeatures> feats{{z, 0, 0, 0}, {-10.0 * z, 0, 0, 0}};
    const MetaEval eval = meta_forward(phi, feats);
    CHECK(eval.raw[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(eval.raw[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(eval.alpha[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(eval.alpha[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("meta_forward batch mean is exactly 1 and scale-invariant") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const MetaState phi = MetaState::init(trial + 10);
        std::vector<SampleFeatures> feats;
        const int B = 2 + static_cast<int>(rng.below(7));
        for (int i = 0; i < B; ++i) {
            feats.push_back({rng.uniform(), rng.uniform(0, 0.2), rng.uniform(), rng.uniform()});
        }
        const MetaEval eval = meta_forward(phi, feats);
        double mean = 0.0;
        for (const double a : eval.alpha) {
            CHECK(a > 0.0);
            mean += a;
        }
        mean /= B;
        CHECK(std::abs(mean - 1.0) <= 1e-12);
        // Scaling every raw weight by a constant leaves the normalized
        // weights unchanged.
        double mean2 = 0.0;
        for (const double r : eval.raw) {
            mean2 += 2.0 * r;
        }
        mean2 /= B;
        for (std::size_t i = 0; i < eval.raw.size(); ++i) {
            CHECK(close_rel(2.0 * eval.raw[i] / mean2, eval.alpha[i], 1e-14));
        }
    }
}

TEST_CASE("meta_backward_step descends d loss / d alpha") {
    // With h favoring sample 0 (negative hypergradient means upweight), the
    // meta net should raise alpha for features like sample 0's.
    MetaState phi = MetaState::init(42);
    const std::vector<SampleFeatures> feats{{0.9, 0.05, 0.2, 0.1}, {0.1, 0.05, 0.9, 0.1}};
    for (int iter = 0; iter < 200; ++iter) {
        const MetaEval eval = meta_forward(phi, feats);
        meta_backward_step(phi, eval, {-0.01, +0.01}, 1e-2);
    }
    const MetaEval eval = meta_forward(phi, feats);
    CHECK(eval.alpha[0] > 1.1);
    CHECK(eval.alpha[1] < 0.9);
}

TEST_CASE("inner_step with beta 0 and unit alpha equals a plain AdamW step") {
    Rng rng(5);
    auto samples = toy_set(2, 900);
    annotate_dataset(samples, AnnotateOptions{});
    std::vector<BatchItem> batch;
    for (const auto& s : samples) {
        batch.push_back({&s.image, &s.pseudo_label});
    }

    DetectorState a = DetectorState::init(77);
    DetectorState b = a;
    const InnerStepResult res = inner_step(a, batch, {1.0, 1.0}, 0.0, {}, 1e-3);

    // Reference: mean gradient, one AdamW step.
    std::vector<double> mean_grad(kDetectorParamCount, 0.0);
    for (const auto& s : samples) {
        const auto fwd = detector_forward(b, s.image);
        const SoftIou iou = soft_iou_loss(fwd.prediction, s.pseudo_label);
        const auto g = detector_backward(fwd.tape, iou.grad_pred);
        for (int j = 0; j < kDetectorParamCount; ++j) {
            mean_grad[j] += 0.5 * g[j];
        }
    }
    adamw_step(b, mean_grad, 1e-3);
    CHECK(a.params == b.params);
    CHECK(a.m == b.m);
    CHECK(res.sample_loss.size() == 2);
}

TEST_CASE("inner_step with zero-gradient labels only decays the weights") {
    // An all-zero target zeroes the soft-IoU gradient identically.
    auto samples = toy_set(2, 901);
    for (auto& s : samples) {
        s.pseudo_label = ScalarField(s.image.width(), s.image.height());
    }
    std::vector<BatchItem> batch;
    for (const auto& s : samples) {
        batch.push_back({&s.image, &s.pseudo_label});
    }
    DetectorState st = DetectorState::init(78);
    const std::vector<double> before = st.params;
    inner_step(st, batch, {1.0, 1.0}, 0.0, {}, 1e-3);
    for (std::size_t i = 0; i < before.size(); ++i) {
        CHECK(st.params[i] == doctest::Approx(before[i] * (1.0 - 1e-3 * 1e-4)).epsilon(1e-15));
    }
}

TEST_CASE("inner_step combined gradient matches finite differences") {
    auto samples = toy_set(2, 902, 16);
    auto val = toy_set(2, 903, 16);
    annotate_dataset(samples, AnnotateOptions{});
    annotate_dataset(val, AnnotateOptions{});
    std::vector<BatchItem> batch, val_batch;
    for (const auto& s : samples) {
        batch.push_back({&s.image, &s.pseudo_label});
    }
    for (const auto& s : val) {
        val_batch.push_back({&s.image, &s.pseudo_label});
    }
    const std::vector<double> alpha{1.3, 0.7};
    const double beta = 0.5;

    DetectorState st = DetectorState::init(79);
    const std::vector<double> params = st.params;
    const InnerStepResult res = inner_step(st, batch, alpha, beta, val_batch, 1e-3);

    auto objective = [&](const std::vector<double>& p) {
        DetectorState probe;
        probe.params = p;
        double acc = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto fwd = detector_forward(probe, *batch[i].image);
            acc += alpha[i] * soft_iou_loss(fwd.prediction, *batch[i].label).loss /
                   static_cast<double>(batch.size());
        }
        double val_acc = 0.0;
        for (const auto& item : val_batch) {
            const auto fwd = detector_forward(probe, *item.image);
            val_acc += soft_iou_loss(fwd.prediction, *item.label).loss /
                       static_cast<double>(val_batch.size());
        }
        return acc + beta * val_acc;
    };

    const double eps = 1e-6;
    for (const int j : {0, 75, 300, 660, 736}) {
        std::vector<double> lo = params, hi = params;
        lo[static_cast<std::size_t>(j)] -= eps;
        hi[static_cast<std::size_t>(j)] += eps;
        const double fd = (objective(hi) - objective(lo)) / (2 * eps);
        CHECK(close_rel(fd, res.combined[static_cast<std::size_t>(j)], 1e-5));
    }
}

TEST_CASE("alpha_hypergradient is zero when the inner rate is zero") {
    auto samples = toy_set(2, 904, 16);
    annotate_dataset(samples, AnnotateOptions{});
    std::vector<BatchItem> batch;
    for (const auto& s : samples) {
        batch.push_back({&s.image, &s.pseudo_label});
    }
    const DetectorState st = DetectorState::init(80);
    const auto h = alpha_hypergradient(st, batch, {1.0, 1.0}, batch, 0.0);
    for (const double v : h) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("alpha_hypergradient matches a brute-force lookahead probe") {
    auto samples = toy_set(3, 905, 16);
    auto val = toy_set(2, 906, 16);
    annotate_dataset(samples, AnnotateOptions{});
    annotate_dataset(val, AnnotateOptions{});
    std::vector<BatchItem> batch, val_batch;
    for (const auto& s : samples) {
        batch.push_back({&s.image, &s.pseudo_label});
    }
    for (const auto& s : val) {
        val_batch.push_back({&s.image, &s.pseudo_label});
    }
    const std::vector<double> alpha{1.0, 1.2, 0.8};
    const double lr = 1e-2;
    const DetectorState st = DetectorState::init(81);
    const auto h = alpha_hypergradient(st, batch, alpha, val_batch, lr);

    // Oracle: numerically differentiate L_val(omega - lr * sum alpha_i g_i)
    // w.r.t. alpha_i through the same one-step lookahead.
    std::vector<std::vector<double>> grads;
    for (const auto& item : batch) {
        const auto fwd = detector_forward(st, *item.image);
        const SoftIou iou = soft_iou_loss(fwd.prediction, *item.label);
        grads.push_back(detector_backward(fwd.tape, iou.grad_pred));
    }
    auto val_at = [&](const std::vector<double>& a) {
        std::vector<double> look = st.params;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            for (int j = 0; j < kDetectorParamCount; ++j) {
                look[static_cast<std::size_t>(j)] -= lr * a[i] * grads[i][static_cast<std::size_t>(j)];
            }
        }
        DetectorState probe;
        probe.params = look;
        double acc = 0.0;
        for (const auto& item : val_batch) {
            const auto fwd = detector_forward(probe, *item.image);
            acc += soft_iou_loss(fwd.prediction, *item.label).loss /
                   static_cast<double>(val_batch.size());
        }
        return acc;
    };
    const double eps = 1e-4;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        auto lo = alpha, hi = alpha;
        lo[i] -= eps;
        hi[i] += eps;
        const double fd = (val_at(hi) - val_at(lo)) / (2 * eps);
        CHECK(close_rel(fd, h[i], 1e-4));
    }
}

TEST_CASE("a sample duplicated in the validation batch is upweighted") {
    auto samples = toy_set(2, 907, 24);
    annotate_dataset(samples, AnnotateOptions{});
    std::vector<BatchItem> batch;
    for (const auto& s : samples) {
        batch.push_back({&s.image, &s.pseudo_label});
    }
    // Validation batch = sample 0 only: raising alpha_0 must lower val loss.
    const std::vector<BatchItem> val_batch{batch[0]};
    const DetectorState st = DetectorState::init(82);
    const auto h = alpha_hypergradient(st, batch, {1.0, 1.0}, val_batch, 1e-2);
    CHECK(h[0] < 0.0);
}

TEST_CASE("surrogate_forward endpoints") {
    Rng rng(6);
    const ScalarField img = random_image(16, 16, rng);
    const ScalarField y = random_image(16, 16, rng, 0.0, 0.5);
    DiffusionParams theta;

    const SurrogateEval j0 = surrogate_forward(y, img, theta, 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK(j0.mask[i] == y[i]);
    }
    theta.rho = 0.0;
    const SurrogateEval r0 = surrogate_forward(y, img, theta, 5);
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK(r0.mask[i] == y[i]);
    }
}

TEST_CASE("surrogate theta gradients match finite differences") {
    Rng base(7);
    for (int seed = 0; seed < 4; ++seed) {
        Rng rng = base.fork(seed);
        const ScalarField img = random_image(12, 12, rng);
        const ScalarField y = random_image(12, 12, rng, 0.01, 0.9);
        const ScalarField target = random_image(12, 12, rng, 0.0, 1.0);
        DiffusionParams theta;
        theta.kappa = rng.uniform(0.08, 0.3);
        theta.tau = rng.uniform(0.05, 0.2);
        theta.rho = rng.uniform(0.2, 0.8);
        const int J = 4;

        auto loss_at = [&](double kappa, double tau, double rho) {
            DiffusionParams t = theta;
            t.kappa = kappa;
            t.tau = tau;
            t.rho = rho;
            const SurrogateEval e = surrogate_forward(y, img, t, J);
            return soft_iou_loss(e.mask, target).loss;
        };

        const SurrogateEval eval = surrogate_forward(y, img, theta, J);
        const SoftIou iou = soft_iou_loss(eval.mask, target);
        const ThetaGrad g = surrogate_backward(eval, y, img, theta, iou.grad_pred, J);

        const double eps = 1e-5;
        const double fdk =
            (loss_at(theta.kappa + eps, theta.tau, theta.rho) -
             loss_at(theta.kappa - eps, theta.tau, theta.rho)) / (2 * eps);
        const double fdt =
            (loss_at(theta.kappa, theta.tau + eps, theta.rho) -
             loss_at(theta.kappa, theta.tau - eps, theta.rho)) / (2 * eps);
        const double fdr =
            (loss_at(theta.kappa, theta.tau, theta.rho + eps) -
             loss_at(theta.kappa, theta.tau, theta.rho - eps)) / (2 * eps);
        CHECK(close_rel(fdk, g.kappa, 1e-4));
        CHECK(close_rel(fdt, g.tau, 1e-4));
        CHECK(close_rel(fdr, g.rho, 1e-4));
    }
}

TEST_CASE("theta_step with zero learning rate leaves theta unchanged") {
    Rng rng(8);
    const ScalarField img = random_image(16, 16, rng);
    const ScalarField y = random_image(16, 16, rng, 0.0, 0.6);
    const ScalarField label = random_image(16, 16, rng);
    DiffusionParams theta;
    ThetaOptimizer opt;
    const DiffusionParams before = theta;
    theta_step(theta, opt, {{&y, &label, &img}}, 0.0);
    CHECK(theta.kappa == doctest::Approx(before.kappa).epsilon(1e-14));
    CHECK(theta.tau == doctest::Approx(before.tau).epsilon(1e-14));
    CHECK(theta.rho == doctest::Approx(before.rho).epsilon(1e-14));
}

TEST_CASE("theta_step keeps every projection after 100 random steps") {
    Rng rng(9);
    DiffusionParams theta;
    ThetaOptimizer opt;
    for (int step = 0; step < 100; ++step) {
        const ScalarField img = random_image(12, 12, rng);
        const ScalarField y = random_image(12, 12, rng, 0.0, 0.9);
        const ScalarField label = random_image(12, 12, rng);
        theta_step(theta, opt, {{&y, &label, &img}}, 0.05);
        CHECK(theta.kappa >= 1e-3);
        CHECK(theta.tau > 0.0);
        CHECK(theta.tau <= kUniversalStableTau);
        CHECK(theta.rho >= 0.0);
        CHECK(theta.rho <= 1.0);
    }
}

TEST_CASE("theta_step does not increase the alignment loss on a frozen batch") {
    Rng rng(10);
    const ScalarField img = random_image(24, 24, rng);
    ScalarField y(24, 24, 0.02);
    for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) {
            y.at(12 + dx, 12 + dy) = 0.8;
        }
    }
    ScalarField label(24, 24);
    for (int dy = -3; dy <= 3; ++dy) {
        for (int dx = -3; dx <= 3; ++dx) {
            label.at(12 + dx, 12 + dy) = 1.0;
        }
    }
    DiffusionParams theta;
    ThetaOptimizer opt;
    const std::vector<ThetaItem> batch{{&y, &label, &img}};
    std::vector<double> losses;
    for (int step = 0; step < 11; ++step) {
        losses.push_back(theta_step(theta, opt, batch, 1e-2));
    }
    CHECK(losses.back() <= losses.front() + 1e-6);
}

TEST_CASE("train is deterministic for a fixed seed") {
    auto train_set = toy_set(8, 1000);
    auto val_set = toy_set(4, 1001);
    TrainConfig cfg;
    cfg.total_epochs = 3;
    cfg.activation_epoch = 1;
    cfg.theta_period = 1;
    cfg.batch_size = 4;
    cfg.seed = 5;
    const TrainResult a = train(cfg, train_set, val_set, Ablation::Full);
    const TrainResult b = train(cfg, train_set, val_set, Ablation::Full);
    CHECK(a.detector.params == b.detector.params);
    CHECK(a.meta.params == b.meta.params);
    CHECK(a.theta.kappa == b.theta.kappa);
    CHECK(a.theta.rho == b.theta.rho);
    REQUIRE(a.history.epochs.size() == b.history.epochs.size());
    for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
        CHECK(a.history.epochs[e].train_loss == b.history.epochs[e].train_loss);
        CHECK(a.history.epochs[e].val_loss == b.history.epochs[e].val_loss);
    }
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.total_epochs = 10;
    cfg.activation_epoch = 10;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
    cfg.activation_epoch = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
    cfg.activation_epoch = 5;
    cfg.theta_period = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
    cfg.theta_period = 2;
    cfg.beta = -0.1;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
    cfg.beta = 0.5;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("plain-supervision ablation reduces to a reference single-level loop") {
    auto train_set = toy_set(6, 1002);
    auto val_set = toy_set(3, 1003);
    TrainConfig cfg;
    cfg.total_epochs = 4;
    cfg.activation_epoch = 2;
    cfg.batch_size = 4;
    cfg.seed = 11;
    const TrainResult got = train(cfg, train_set, val_set, Ablation::A4);

    // Reference loop: identical annotation, init, shuffles and steps,
    // written out longhand.
    auto ref_set = train_set;
    AnnotateOptions opts;
    opts.diffusion = cfg.diffusion;
    opts.slic = cfg.slic;
    opts.rel_threshold = cfg.rel_threshold;
    annotate_dataset(ref_set, opts);
    Rng base(cfg.seed);
    Rng shuffle_rng = base.fork(1);
    DetectorState omega = DetectorState::init(base.fork(4).next_u64());
    std::vector<std::size_t> order(ref_set.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.below(i);
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            std::vector<double> mean_grad(kDetectorParamCount, 0.0);
            const double inv = 1.0 / static_cast<double>(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                const Sample& s = ref_set[order[i]];
                const auto fwd = detector_forward(omega, s.image);
                const SoftIou iou = soft_iou_loss(fwd.prediction, s.pseudo_label);
                const auto g = detector_backward(fwd.tape, iou.grad_pred);
                for (int j = 0; j < kDetectorParamCount; ++j) {
                    mean_grad[static_cast<std::size_t>(j)] += inv * g[static_cast<std::size_t>(j)];
                }
            }
            adamw_step(omega, mean_grad, cfg.lr_omega);
        }
    }
    CHECK(got.detector.params == omega.params);
    CHECK(got.detector.m == omega.m);
}

TEST_CASE("B2 and full produce different trajectories after activation") {
    auto train_set = toy_set(10, 1004);
    auto val_set = toy_set(5, 1005);
    TrainConfig cfg;
    cfg.total_epochs = 6;
    cfg.activation_epoch = 2;
    cfg.theta_period = 2;
    cfg.batch_size = 5;
    cfg.seed = 21;
    const TrainResult full = train(cfg, train_set, val_set, Ablation::Full);
    const TrainResult b2 = train(cfg, train_set, val_set, Ablation::B2);
    CHECK(full.detector.params != b2.detector.params);
}

TEST_CASE("theta stays valid during training") {
    auto train_set = toy_set(8, 1006);
    auto val_set = toy_set(4, 1007);
    TrainConfig cfg;
    cfg.total_epochs = 5;
    cfg.activation_epoch = 1;
    cfg.theta_period = 1;
    cfg.batch_size = 4;
    cfg.seed = 31;
    const TrainResult r = train(cfg, train_set, val_set, Ablation::Full);
    for (const EpochLog& log : r.history.epochs) {
        CHECK(log.kappa > 0.0);
        CHECK(log.tau > 0.0);
        CHECK(log.tau <= kUniversalStableTau);
        CHECK(log.rho >= 0.0);
        CHECK(log.rho <= 1.0);
    }
}

TEST_CASE("rank_samples_by_alpha sorts by mean weight with stable ties") {
    TrainHistory hist;
    hist.sample_ids = {"a", "b", "c"};
    hist.sample_buckets = {0, 0, 0};
    hist.alpha_sum = {2.6, 1.4, 2.6};
    hist.alpha_count = {2, 2, 2};
    hist.activation_epoch = 1;
    hist.completed_epochs = 4;
    const auto ranked = rank_samples_by_alpha(hist);
    REQUIRE(ranked.size() == 3);
    CHECK(ranked[0].index == 0); // tie with c, dataset order wins
    CHECK(ranked[1].index == 2);
    CHECK(ranked[2].index == 1);
    CHECK(ranked[0].mean_alpha == doctest::Approx(1.3));
}

TEST_CASE("rank_samples_by_alpha equal weights keep id order") {
    TrainHistory hist;
    hist.sample_ids = {"s0", "s1", "s2", "s3"};
    hist.sample_buckets = {0, 0, 0, 0};
    hist.alpha_sum = {3.0, 3.0, 3.0, 3.0};
    hist.alpha_count = {3, 3, 3, 3};
    hist.activation_epoch = 0;
    hist.completed_epochs = 3;
    const auto ranked = rank_samples_by_alpha(hist);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        CHECK(ranked[i].index == i);
    }
}

TEST_CASE("rank_samples_by_alpha before activation throws NotReady") {
    TrainHistory hist;
    hist.sample_ids = {"a"};
    hist.sample_buckets = {0};
    hist.alpha_sum = {0.0};
    hist.alpha_count = {0};
    hist.activation_epoch = 10;
    hist.completed_epochs = 5;
    CHECK_THROWS_AS(rank_samples_by_alpha(hist), NotReady);
}
