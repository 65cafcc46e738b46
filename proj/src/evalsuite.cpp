#include "istd/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <tuple>

#include "json.hpp"

namespace istd {

std::vector<Component> connected_components(const BinaryMask& mask) {
    const int W = mask.width();
    const int H = mask.height();
    std::vector<int> seen(mask.size(), 0);
    std::vector<Component> out;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || seen[start]) {
            continue;
        }
        Component comp;
        stack.clear();
        stack.push_back(start);
        seen[start] = 1;
        double sx = 0.0, sy = 0.0;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            comp.pixels.push_back(p);
            const int x = static_cast<int>(p % W);
            const int y = static_cast<int>(p / W);
            sx += x;
            sy += y;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) {
                        continue;
                    }
                    const int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= W || ny < 0 || ny >= H) {
                        continue;
                    }
                    const std::size_t q = static_cast<std::size_t>(ny) * W + nx;
                    if (mask[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
            }
        }
        comp.cx = sx / static_cast<double>(comp.pixels.size());
        comp.cy = sy / static_cast<double>(comp.pixels.size());
        std::sort(comp.pixels.begin(), comp.pixels.end());
        out.push_back(std::move(comp));
    }
    return out;
}

double pixel_iou(const BinaryMask& pred, const BinaryMask& gt) {
    if (!pred.same_shape(gt)) {
        throw ShapeError("pixel_iou: shape mismatch");
    }
    long long inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += pred[i] & gt[i];
        uni += pred[i] | gt[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MetricsReport dataset_metrics(const std::vector<BinaryMask>& preds,
                              const std::vector<BinaryMask>& gts, double dist_thresh,
                              const std::vector<std::string>* ids) {
    if (preds.size() != gts.size() || (ids && ids->size() != preds.size())) {
        throw ShapeError("dataset_metrics: list length mismatch");
    }
    MetricsReport report;
    long long inter_all = 0, union_all = 0, detected_all = 0, targets_all = 0;
    long long false_all = 0, pixels_all = 0;

    for (std::size_t i = 0; i < preds.size(); ++i) {
        const BinaryMask& pred = preds[i];
        const BinaryMask& gt = gts[i];
        if (!pred.same_shape(gt)) {
            throw ShapeError("dataset_metrics: image " + std::to_string(i) + " shape mismatch");
        }
        PerImageMetrics row;
        row.id = ids ? (*ids)[i] : std::to_string(i);
        row.image_pixels = static_cast<long long>(pred.size());
        for (std::size_t p = 0; p < pred.size(); ++p) {
            row.intersection += pred[p] & gt[p];
            row.union_pixels += pred[p] | gt[p];
        }
        row.iou = row.union_pixels == 0
                      ? 1.0
                      : static_cast<double>(row.intersection) / row.union_pixels;

        const auto pred_comps = connected_components(pred);
        const auto gt_comps = connected_components(gt);
        row.total_targets = static_cast<int>(gt_comps.size());

        // Candidate (distance, pred, gt) pairs within the threshold, matched
        // greedily nearest-first; each side matches at most once.
        std::vector<std::tuple<double, int, int>> cands;
        for (int pi = 0; pi < static_cast<int>(pred_comps.size()); ++pi) {
            for (int gi = 0; gi < static_cast<int>(gt_comps.size()); ++gi) {
                const double dx = pred_comps[pi].cx - gt_comps[gi].cx;
                const double dy = pred_comps[pi].cy - gt_comps[gi].cy;
                const double d = std::sqrt(dx * dx + dy * dy);
                if (d <= dist_thresh) {
                    cands.emplace_back(d, pi, gi);
                }
            }
        }
        std::sort(cands.begin(), cands.end());
        std::vector<char> pred_used(pred_comps.size(), 0);
        std::vector<char> gt_used(gt_comps.size(), 0);
        for (const auto& [d, pi, gi] : cands) {
            (void)d;
            if (pred_used[pi] || gt_used[gi]) {
                continue;
            }
            pred_used[pi] = 1;
            gt_used[gi] = 1;
            ++row.detected_targets;
        }
        for (std::size_t pi = 0; pi < pred_comps.size(); ++pi) {
            if (!pred_used[pi]) {
                row.false_pixels += static_cast<long long>(pred_comps[pi].pixels.size());
            }
        }

        inter_all += row.intersection;
        union_all += row.union_pixels;
        detected_all += row.detected_targets;
        targets_all += row.total_targets;
        false_all += row.false_pixels;
        pixels_all += row.image_pixels;
        report.per_image.push_back(std::move(row));
    }

    report.iou = union_all == 0 ? 1.0 : static_cast<double>(inter_all) / union_all;
    double niou_sum = 0.0;
    for (const auto& row : report.per_image) {
        niou_sum += row.iou;
    }
    report.niou = report.per_image.empty() ? 1.0 : niou_sum / report.per_image.size();
    report.pd = targets_all == 0 ? 1.0 : static_cast<double>(detected_all) / targets_all;
    report.fa = pixels_all == 0 ? 0.0 : static_cast<double>(false_all) / pixels_all;
    return report;
}

void write_report(const std::string& path, const MetricsReport& report) {
    nlohmann::json j;
    j["iou"] = report.iou;
    j["niou"] = report.niou;
    j["pd"] = report.pd;
    j["fa"] = report.fa;
    j["fa_e6"] = report.fa * 1e6;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.per_image) {
        rows.push_back({{"id", row.id},
                        {"iou", row.iou},
                        {"detected_targets", row.detected_targets},
                        {"total_targets", row.total_targets},
                        {"false_pixels", row.false_pixels},
                        {"intersection", row.intersection},
                        {"union_pixels", row.union_pixels},
                        {"image_pixels", row.image_pixels}});
    }
    j["per_image"] = rows;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IngestError(path + ": cannot open for writing");
    }
    out << j.dump(2) << "\n";
}

} // namespace istd
