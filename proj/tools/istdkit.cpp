// Command-line front end: synth / annotate / train / eval / bench.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "istd/annotator.hpp"
#include "istd/bilevel.hpp"
#include "istd/datakit.hpp"
#include "istd/evalsuite.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (const char c : s) {
        h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    }
    return h;
}

void apply_config_file(const std::string& path, istd::TrainConfig& cfg) {
    std::ifstream in(path);
    if (!in) {
        throw istd::IngestError(path + ": cannot open config");
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw istd::IngestError(path + ": " + e.what());
    }
    auto get = [&](const char* key, auto& dst) {
        if (j.contains(key)) {
            dst = j.at(key).get<std::decay_t<decltype(dst)>>();
        }
    };
    get("total_epochs", cfg.total_epochs);
    get("activation_epoch", cfg.activation_epoch);
    get("theta_period", cfg.theta_period);
    get("beta", cfg.beta);
    get("lr_omega", cfg.lr_omega);
    get("lr_phi", cfg.lr_phi);
    get("lr_theta", cfg.lr_theta);
    get("batch_size", cfg.batch_size);
    get("crop", cfg.crop);
    get("seed", cfg.seed);
    get("kappa", cfg.diffusion.kappa);
    get("tau", cfg.diffusion.tau);
    get("steps", cfg.diffusion.steps);
    get("rho", cfg.diffusion.rho);
    get("cell", cfg.slic.cell);
    get("compactness", cfg.slic.compactness);
    get("slic_iters", cfg.slic.iters);
    get("rel_threshold", cfg.rel_threshold);
    get("surrogate_steps", cfg.surrogate_steps);
}

int cmd_synth(int count, int size, uint64_t seed, const std::string& out, bool coarse) {
    istd::SceneSpec spec;
    spec.width = size;
    spec.height = size;
    spec.seed = seed;
    spec.point_mode = coarse ? istd::PointMode::Coarse : istd::PointMode::Centroid;
    const auto samples = istd::synth_dataset(spec, count);
    istd::write_dataset(out, samples, "train");
    std::cout << "wrote " << samples.size() << " scenes to " << out << "\n";
    return 0;
}

int cmd_annotate(const std::string& data, const std::string& out,
                 const istd::AnnotateOptions& opts, bool coarse) {
    auto samples = istd::materialize(istd::load_dataset(data, ""));
    if (coarse) {
        for (auto& s : samples) {
            s.points = istd::coarsen_points(s.points, s.has_gt ? &s.gt_mask : nullptr,
                                            s.image.width(), s.image.height(), fnv1a(s.id));
        }
    }
    std::size_t targets = 0;
    for (const auto& s : samples) {
        targets += s.points.size();
    }
    const auto t0 = std::chrono::steady_clock::now();
    istd::annotate_dataset(samples, opts);
    const auto t1 = std::chrono::steady_clock::now();

    fs::create_directories(out);
    double iou_sum = 0.0;
    std::size_t iou_n = 0;
    for (const auto& s : samples) {
        istd::write_smsk((fs::path(out) / (s.id + ".smsk")).string(), s.pseudo_label);
        istd::SoftMask sm;
        sm.field = s.pseudo_label;
        sm.source = s.points.empty() ? istd::PointAnnotation{0, 0, 0} : s.points.front();
        const istd::BinaryMask bin = istd::binarize(sm, opts.rel_threshold);
        istd::write_pgm((fs::path(out) / (s.id + ".pgm")).string(), bin);
        if (s.has_gt && !s.points.empty()) {
            iou_sum += istd::pixel_iou(bin, s.gt_mask);
            ++iou_n;
        }
    }
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    std::cout << "images: " << samples.size() << "\n";
    std::cout << "targets: " << targets << "\n";
    if (iou_n > 0) {
        std::cout << "mean_iou: " << iou_sum / static_cast<double>(iou_n) << "\n";
    }
    if (targets > 0) {
        std::cout << "seconds_per_target: " << secs / static_cast<double>(targets) << "\n";
    }
    return 0;
}

int cmd_train(const istd::TrainConfig& cfg, const std::string& data, const std::string& val,
              const std::string& out, const std::string& ablation) {
    auto train_set = istd::materialize(istd::load_dataset(data, ""));
    auto val_set = istd::materialize(istd::load_dataset(val, ""));
    istd::TrainConfig run = cfg;
    fs::create_directories(out);
    run.checkpoint_dir = out;
    const istd::Ablation abl = istd::ablation_from_string(ablation);
    const istd::TrainResult result = istd::train(run, std::move(train_set), std::move(val_set), abl);

    istd::save_checkpoint((fs::path(out) / "checkpoint.dckp").string(), result.detector);
    json theta = {{"kappa", result.theta.kappa},
                  {"tau", result.theta.tau},
                  {"steps", result.theta.steps},
                  {"rho", result.theta.rho}};
    std::ofstream theta_out((fs::path(out) / "theta.json").string(), std::ios::trunc);
    theta_out << theta.dump(2) << "\n";
    istd::write_history_jsonl((fs::path(out) / "log.jsonl").string(), result.history);
    try {
        const auto ranked = istd::rank_samples_by_alpha(result.history);
        std::ofstream rank_out((fs::path(out) / "alpha_rank.csv").string(), std::ios::trunc);
        rank_out << "image_id,mean_alpha\n";
        for (const auto& r : ranked) {
            rank_out << r.id << "," << r.mean_alpha << "\n";
        }
    } catch (const istd::NotReady&) {
        // Plain-supervision runs have no learned weights to export.
    }
    const auto& last = result.history.epochs.back();
    std::cout << "final train_loss: " << last.train_loss << " val_loss: " << last.val_loss
              << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& report,
             double dist) {
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(pred_dir)) {
        if (entry.path().extension() == ".pgm") {
            names.push_back(entry.path().filename().string());
        }
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) {
        throw istd::IngestError(pred_dir + ": no .pgm masks found");
    }
    std::vector<istd::BinaryMask> preds, gts;
    std::vector<std::string> ids;
    for (const auto& name : names) {
        const std::string gt_path = (fs::path(gt_dir) / name).string();
        if (!fs::exists(gt_path)) {
            throw istd::IngestError(gt_path + ": missing ground-truth mask");
        }
        preds.push_back(istd::load_pgm_mask((fs::path(pred_dir) / name).string()));
        gts.push_back(istd::load_pgm_mask(gt_path));
        ids.push_back(fs::path(name).stem().string());
    }
    const istd::MetricsReport rep = istd::dataset_metrics(preds, gts, dist, &ids);
    istd::write_report(report, rep);
    std::cout << "iou: " << rep.iou << " niou: " << rep.niou << " pd: " << rep.pd
              << " fa_e6: " << rep.fa * 1e6 << "\n";
    return 0;
}

int cmd_bench(const std::string& data, int repeat, const istd::AnnotateOptions& opts) {
    const auto samples = istd::materialize(istd::load_dataset(data, ""));
    std::vector<double> latencies;
    for (const auto& s : samples) {
        if (s.points.empty()) {
            continue;
        }
        const istd::SuperpixelLabels spx = istd::slic(s.image, opts.slic);
        for (int r = 0; r < repeat; ++r) {
            for (const auto& p : s.points) {
                const auto t0 = std::chrono::steady_clock::now();
                const auto sm = istd::generate_pseudo_label(s.image, p, opts.diffusion, spx);
                const auto t1 = std::chrono::steady_clock::now();
                (void)sm;
                latencies.push_back(std::chrono::duration<double>(t1 - t0).count());
            }
        }
    }
    if (latencies.empty()) {
        throw istd::InvalidParam("bench: dataset has no annotated targets");
    }
    std::sort(latencies.begin(), latencies.end());
    const double median = latencies[latencies.size() / 2];
    const double p95 = latencies[static_cast<std::size_t>(
        std::min<double>(static_cast<double>(latencies.size()) - 1.0,
                         std::ceil(0.95 * static_cast<double>(latencies.size())) - 1.0))];
    std::cout << "measurements: " << latencies.size() << "\n";
    std::cout << "median_seconds_per_target: " << median << "\n";
    std::cout << "p95_seconds_per_target: " << p95 << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Point-supervised infrared small-target toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    int count = 16, size = 256;
    uint64_t seed = 0;
    std::string out_dir;
    bool coarse = false;
    synth->add_option("--count", count, "Number of scenes")->required();
    synth->add_option("--size", size, "Square image size");
    synth->add_option("--seed", seed, "Generator seed");
    synth->add_option("--out", out_dir, "Output dataset directory")->required();
    synth->add_flag("--coarse", coarse, "Coarse (jittered) annotation points");

    // annotate
    auto* annotate = app.add_subcommand("annotate", "Expand points into pseudo-masks");
    std::string data_dir, ann_out;
    istd::AnnotateOptions ann_opts;
    bool ann_coarse = false;
    annotate->add_option("--data", data_dir, "Dataset directory")->required();
    annotate->add_option("--out", ann_out, "Output directory")->required();
    annotate->add_option("--kappa", ann_opts.diffusion.kappa, "Edge sensitivity");
    annotate->add_option("--tau", ann_opts.diffusion.tau, "Diffusion step size");
    annotate->add_option("--steps", ann_opts.diffusion.steps, "Diffusion iterations");
    annotate->add_option("--rho", ann_opts.diffusion.rho, "Diffusion/superpixel blend");
    annotate->add_option("--cell", ann_opts.slic.cell, "Superpixel cell size");
    annotate->add_option("--compactness", ann_opts.slic.compactness, "Superpixel compactness");
    annotate->add_option("--threshold", ann_opts.rel_threshold, "Binarization threshold");
    annotate->add_flag("--coarse", ann_coarse, "Jitter points before annotating");

    // train
    auto* train_cmd = app.add_subcommand("train", "Run the bi-level training loop");
    std::string train_data, val_data, train_out, config_path, ablation = "full";
    istd::TrainConfig cfg;
    train_cmd->add_option("--data", train_data, "Training dataset directory")->required();
    train_cmd->add_option("--val", val_data, "Validation dataset directory")->required();
    train_cmd->add_option("--out", train_out, "Output directory")->required();
    train_cmd->add_option("--config", config_path, "JSON config file");
    train_cmd->add_option("--ablation", ablation, "full|A1|A2|A3|A4|B1|B2|B3|B4");
    auto* o_epochs = train_cmd->add_option("--epochs", cfg.total_epochs, "Total epochs");
    auto* o_act = train_cmd->add_option("--activation", cfg.activation_epoch,
                                        "Outer-level activation epoch");
    auto* o_period = train_cmd->add_option("--period", cfg.theta_period, "Theta update period");
    auto* o_beta = train_cmd->add_option("--beta", cfg.beta, "Validation blend weight");
    auto* o_lro = train_cmd->add_option("--lr-omega", cfg.lr_omega, "Detector learning rate");
    auto* o_lrp = train_cmd->add_option("--lr-phi", cfg.lr_phi, "Meta learning rate");
    auto* o_lrt = train_cmd->add_option("--lr-theta", cfg.lr_theta, "Theta learning rate");
    auto* o_batch = train_cmd->add_option("--batch", cfg.batch_size, "Batch size");
    auto* o_crop = train_cmd->add_option("--crop", cfg.crop, "Random crop size");
    auto* o_seed = train_cmd->add_option("--seed", cfg.seed, "Training seed");
    auto* o_kappa = train_cmd->add_option("--kappa", cfg.diffusion.kappa, "Initial kappa");
    auto* o_tau = train_cmd->add_option("--tau", cfg.diffusion.tau, "Initial tau");
    auto* o_steps = train_cmd->add_option("--steps", cfg.diffusion.steps, "Diffusion iterations");
    auto* o_rho = train_cmd->add_option("--rho", cfg.diffusion.rho, "Initial rho");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Score predicted masks");
    std::string pred_dir, gt_dir, report_path;
    double dist = 3.0;
    eval_cmd->add_option("--pred", pred_dir, "Predicted mask directory")->required();
    eval_cmd->add_option("--gt", gt_dir, "Ground-truth mask directory")->required();
    eval_cmd->add_option("--report", report_path, "Report JSON path")->required();
    eval_cmd->add_option("--dist", dist, "Centroid match distance");

    // bench
    auto* bench = app.add_subcommand("bench", "Time pseudo-label generation");
    std::string bench_data;
    int repeat = 3;
    istd::AnnotateOptions bench_opts;
    bench->add_option("--data", bench_data, "Dataset directory")->required();
    bench->add_option("--repeat", repeat, "Repetitions per target");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(count, size, seed, out_dir, coarse);
        }
        if (annotate->parsed()) {
            return cmd_annotate(data_dir, ann_out, ann_opts, ann_coarse);
        }
        if (train_cmd->parsed()) {
            istd::TrainConfig merged;
            if (!config_path.empty()) {
                apply_config_file(config_path, merged);
            }
            // Explicit flags win over the config file.
            if (o_epochs->count()) merged.total_epochs = cfg.total_epochs;
            if (o_act->count()) merged.activation_epoch = cfg.activation_epoch;
            if (o_period->count()) merged.theta_period = cfg.theta_period;
            if (o_beta->count()) merged.beta = cfg.beta;
            if (o_lro->count()) merged.lr_omega = cfg.lr_omega;
            if (o_lrp->count()) merged.lr_phi = cfg.lr_phi;
            if (o_lrt->count()) merged.lr_theta = cfg.lr_theta;
            if (o_batch->count()) merged.batch_size = cfg.batch_size;
            if (o_crop->count()) merged.crop = cfg.crop;
            if (o_seed->count()) merged.seed = cfg.seed;
            if (o_kappa->count()) merged.diffusion.kappa = cfg.diffusion.kappa;
            if (o_tau->count()) merged.diffusion.tau = cfg.diffusion.tau;
            if (o_steps->count()) merged.diffusion.steps = cfg.diffusion.steps;
            if (o_rho->count()) merged.diffusion.rho = cfg.diffusion.rho;
            return cmd_train(merged, train_data, val_data, train_out, ablation);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(pred_dir, gt_dir, report_path, dist);
        }
        if (bench->parsed()) {
            return cmd_bench(bench_data, repeat, bench_opts);
        }
    } catch (const istd::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
