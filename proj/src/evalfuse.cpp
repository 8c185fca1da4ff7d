#include "modisc/evalfuse.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace modisc::evalfuse {

double iou(const pseudolabel::Mask& a, const pseudolabel::Mask& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("iou: shape mismatch");
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// center-aligned bilinear interpolation of one [sh*sw] map to [dh*dw]
std::vector<double> bilinear_grid(const Tensor& src, int sh, int sw, int dh, int dw) {
    std::vector<double> dst(static_cast<std::size_t>(dh) * dw);
    for (int i = 0; i < dh; ++i) {
        const double fy = std::clamp((i + 0.5) * sh / dh - 0.5, 0.0, sh - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int j = 0; j < dw; ++j) {
            const double fx = std::clamp((j + 0.5) * sw / dw - 0.5, 0.0, sw - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double a = src[static_cast<std::int64_t>(y0) * sw + x0];
            const double b = src[static_cast<std::int64_t>(y0) * sw + x1];
            const double c = src[static_cast<std::int64_t>(y1) * sw + x0];
            const double d = src[static_cast<std::int64_t>(y1) * sw + x1];
            dst[static_cast<std::size_t>(i) * dw + j] =
                (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d);
        }
    }
    return dst;
}

// Interpolate attention maps to image resolution so candidate boundaries
// follow the soft attention rather than 4x4 feature blocks.
AttentionMaps upsample_maps(const AttentionMaps& maps, int h, int w) {
    const int k = maps.num_slots();
    AttentionMaps out;
    out.h = h;
    out.w = w;
    out.slots = Tensor::zeros({static_cast<std::int64_t>(h) * w, k});
    out.background = Tensor::zeros({static_cast<std::int64_t>(h) * w});
    for (int s = 0; s < k; ++s) {
        Tensor col = Tensor::zeros({maps.num_positions()});
        for (std::int64_t i = 0; i < maps.num_positions(); ++i)
            col[i] = maps.slots[i * k + s];
        const auto up = bilinear_grid(col, maps.h, maps.w, h, w);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(up.size()); ++i)
            out.slots[i * k + s] = up[static_cast<std::size_t>(i)];
    }
    const auto up = bilinear_grid(maps.background, maps.h, maps.w, h, w);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(up.size()); ++i)
        out.background[i] = up[static_cast<std::size_t>(i)];
    return out;
}

}  // namespace

std::vector<Prediction> predict_video(const slotcore::ModelParams& params,
                                      const std::vector<Tensor>& frames,
                                      PredModality modality, int min_area,
                                      double conf_threshold) {
    const slotcore::Model model(params, false);
    const int h = params.config.height, w = params.config.width;
    std::vector<Prediction> out;
    const auto frame_outs = model.forward_video(frames);
    for (std::size_t t = 0; t < frame_outs.size(); ++t) {
        Prediction p;
        p.modality = modality;
        p.frame_id = static_cast<int>(t);
        const AttentionMaps full = upsample_maps(frame_outs[t].maps, h, w);
        for (pseudolabel::Candidate& cand :
             pseudolabel::extract_candidates(full, min_area, conf_threshold)) {
            p.masks.masks.push_back(std::move(cand.mask));
            p.masks.scores.push_back(cand.confidence);
        }
        out.push_back(std::move(p));
    }
    return out;
}

Prediction late_fuse(const Prediction& pred2d, const Prediction& pred3d, double tau) {
    if (pred2d.frame_id != pred3d.frame_id)
        throw std::invalid_argument("late_fuse: frame mismatch");
    Prediction out;
    out.modality = PredModality::fused;
    out.frame_id = pred2d.frame_id;
    const auto& a = pred2d.masks.masks;
    const auto& b = pred3d.masks.masks;
    if (a.empty() || b.empty()) return out;
    for (const auto& m : a)
        if (m.h != b[0].h || m.w != b[0].w)
            throw std::invalid_argument("late_fuse: shape mismatch between modalities");

    // Max-total-IoU one-to-one pairing; rows are the smaller set.
    const bool a_rows = a.size() <= b.size();
    const auto& rows = a_rows ? a : b;
    const auto& cols = a_rows ? b : a;
    std::vector<std::vector<double>> cost(rows.size(), std::vector<double>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) cost[i][j] = -iou(rows[i], cols[j]);
    const std::vector<int> assign = pseudolabel::solve_assignment(cost);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int j = assign[i];
        if (j < 0) continue;
        const double overlap = -cost[i][static_cast<std::size_t>(j)];
        if (overlap < tau) continue;
        pseudolabel::Mask fusedm(rows[i].h, rows[i].w);
        for (std::size_t p = 0; p < fusedm.data.size(); ++p)
            fusedm.data[p] = rows[i].data[p] || cols[static_cast<std::size_t>(j)].data[p];
        out.masks.masks.push_back(std::move(fusedm));
    }
    return out;
}

double ari(const pseudolabel::LabelGrid& pred, const pseudolabel::LabelGrid& truth,
           bool foreground_only) {
    if (pred.h != truth.h || pred.w != truth.w)
        throw std::invalid_argument("ari: shape mismatch");
    std::map<std::pair<std::uint16_t, std::uint16_t>, std::int64_t> contingency;
    std::map<std::uint16_t, std::int64_t> pred_counts, true_counts;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        if (foreground_only && truth.labels[i] == 0) continue;
        ++n;
        ++contingency[{pred.labels[i], truth.labels[i]}];
        ++pred_counts[pred.labels[i]];
        ++true_counts[truth.labels[i]];
    }
    if (n < 2) throw std::invalid_argument("ari: fewer than 2 pixels in scope");
    auto choose2 = [](std::int64_t k) { return 0.5 * static_cast<double>(k) * (k - 1); };
    double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, c] : contingency) sum_ij += choose2(c);
    for (const auto& [key, c] : pred_counts) sum_a += choose2(c);
    for (const auto& [key, c] : true_counts) sum_b += choose2(c);
    const double total_pairs = choose2(n);
    const double expected = sum_a * sum_b / total_pairs;
    const double max_index = 0.5 * (sum_a + sum_b);
    const double denom = max_index - expected;
    if (denom == 0.0) return 1.0;  // both partitions trivial
    return (sum_ij - expected) / denom;
}

F1Result f1_at_iou(const Prediction& pred, const pseudolabel::MaskSet& gt,
                   double iou_threshold) {
    if (iou_threshold <= 0.0 || iou_threshold > 1.0)
        throw std::invalid_argument("f1_at_iou: threshold outside (0,1]");
    const auto& preds = pred.masks.masks;
    const auto& gts = gt.masks;
    struct PairIoU {
        double v;
        std::size_t p, g;
    };
    std::vector<PairIoU> pairs;
    for (std::size_t p = 0; p < preds.size(); ++p)
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(preds[p], gts[g]);
            if (v >= iou_threshold) pairs.push_back({v, p, g});
        }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const PairIoU& x, const PairIoU& y) { return x.v > y.v; });
    std::vector<char> pred_used(preds.size(), 0), gt_used(gts.size(), 0);
    int tp = 0;
    for (const auto& pr : pairs) {
        if (pred_used[pr.p] || gt_used[pr.g]) continue;
        pred_used[pr.p] = 1;
        gt_used[pr.g] = 1;
        ++tp;
    }
    F1Result r;
    r.tp = tp;
    r.fp = static_cast<int>(preds.size()) - tp;
    r.fn = static_cast<int>(gts.size()) - tp;
    r.precision = preds.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(preds.size());
    r.recall = gts.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gts.size());
    r.f1 = (r.precision + r.recall) > 0.0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
    return r;
}

std::vector<Band> default_bands() { return {{0.0, 10.0}, {10.0, 30.0}, {30.0, 70.0}}; }

std::vector<BandRow> banded_eval(const Prediction& pred, const pseudolabel::MaskSet& gt,
                                 const pcproj::FrontViewImage& fv,
                                 const std::vector<Band>& bands, double iou_threshold) {
    if (bands.empty()) throw std::invalid_argument("banded_eval: no bands");
    // Band per GT object by median valid-pixel distance.
    std::vector<int> band_of(gt.masks.size(), -1);
    std::vector<int> valid_points(gt.masks.size(), 0);
    for (std::size_t g = 0; g < gt.masks.size(); ++g) {
        const pseudolabel::Mask& m = gt.masks[g];
        if (m.h != fv.height || m.w != fv.width)
            throw std::invalid_argument("banded_eval: GT mask/front-view shape mismatch");
        std::vector<double> dists;
        for (const auto& [i, j] : fv.valid_set)
            if (m.at(i, j)) dists.push_back(fv.depth(i, j));
        valid_points[g] = static_cast<int>(dists.size());
        if (dists.empty()) {
            std::cerr << "banded_eval: GT object " << g
                      << " has no valid pixels, assigned to farthest band\n";
            band_of[g] = static_cast<int>(bands.size()) - 1;
            continue;
        }
        std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
        double median = dists[dists.size() / 2];
        if (dists.size() % 2 == 0) {
            const double hi = median;
            std::nth_element(dists.begin(), dists.begin() + dists.size() / 2 - 1, dists.end());
            median = 0.5 * (dists[dists.size() / 2 - 1] + hi);
        }
        int chosen = static_cast<int>(bands.size()) - 1;
        for (std::size_t b = 0; b < bands.size(); ++b)
            if (median >= bands[b].lo && median < bands[b].hi) {
                chosen = static_cast<int>(b);
                break;
            }
        band_of[g] = chosen;
    }

    std::vector<BandRow> rows;
    for (std::size_t b = 0; b < bands.size(); ++b) {
        pseudolabel::MaskSet band_gt;
        std::int64_t pts = 0;
        for (std::size_t g = 0; g < gt.masks.size(); ++g)
            if (band_of[g] == static_cast<int>(b)) {
                band_gt.masks.push_back(gt.masks[g]);
                pts += valid_points[g];
            }
        // predictions overlapping this band's GT
        Prediction band_pred;
        band_pred.frame_id = pred.frame_id;
        band_pred.modality = pred.modality;
        for (const auto& pm : pred.masks.masks) {
            bool overlaps = false;
            for (const auto& gm : band_gt.masks)
                if (iou(pm, gm) > 0.0) {
                    overlaps = true;
                    break;
                }
            if (overlaps) band_pred.masks.masks.push_back(pm);
        }
        const F1Result f1 = f1_at_iou(band_pred, band_gt, iou_threshold);
        BandRow row;
        row.lo = bands[b].lo;
        row.hi = bands[b].hi;
        row.num_objects = static_cast<int>(band_gt.masks.size());
        row.avg_points_per_object =
            band_gt.masks.empty() ? 0.0
                                  : static_cast<double>(pts) /
                                        static_cast<double>(band_gt.masks.size());
        row.f1 = f1.f1;
        row.precision = f1.precision;
        row.recall = f1.recall;
        rows.push_back(row);
    }
    return rows;
}

void EvalAccumulator::add_frame(const Prediction& pred, const pseudolabel::LabelGrid& gt_labels,
                                double iou_threshold) {
    const pseudolabel::LabelGrid pred_labels =
        pseudolabel::labels_from_masks(pred.masks, gt_labels.h, gt_labels.w);
    bool has_fg = false;
    for (std::uint16_t v : gt_labels.labels)
        if (v) has_fg = true;
    if (has_fg) fg_ari_sum_ += ari(pred_labels, gt_labels, true);
    all_ari_sum_ += ari(pred_labels, gt_labels, false);
    const pseudolabel::MaskSet gt = pseudolabel::masks_from_labels(gt_labels);
    const F1Result f1 = f1_at_iou(pred, gt, iou_threshold);
    tp_ += f1.tp;
    fp_ += f1.fp;
    fn_ += f1.fn;
    ++frames_;
}

MetricsReport EvalAccumulator::report() const {
    MetricsReport r;
    if (frames_ > 0) {
        r.fg_ari = fg_ari_sum_ / frames_;
        r.all_ari = all_ari_sum_ / frames_;
    }
    r.precision = (tp_ + fp_) > 0 ? static_cast<double>(tp_) / (tp_ + fp_) : 0.0;
    r.recall = (tp_ + fn_) > 0 ? static_cast<double>(tp_) / (tp_ + fn_) : 0.0;
    r.f1_50 = (r.precision + r.recall) > 0.0
                  ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                  : 0.0;
    return r;
}

void write_report_csv(const MetricsReport& report, std::ostream& os) {
    os << "band_lo,band_hi,avg_pts_per_obj,num_objects,fg_ari,all_ari,f1_50,precision,recall\n";
    os << ",,,," << report.fg_ari << "," << report.all_ari << "," << report.f1_50 << ","
       << report.precision << "," << report.recall << "\n";
    for (const BandRow& b : report.bands)
        os << b.lo << "," << b.hi << "," << b.avg_points_per_object << "," << b.num_objects
           << ",,," << b.f1 << "," << b.precision << "," << b.recall << "\n";
}

void print_report(const MetricsReport& report, std::ostream& os) {
    os << "fg-ARI   " << report.fg_ari << "\n"
       << "all-ARI  " << report.all_ari << "\n"
       << "F1@50    " << report.f1_50 << "\n"
       << "prec     " << report.precision << "\n"
       << "recall   " << report.recall << "\n";
    for (const BandRow& b : report.bands)
        os << "band " << b.lo << "-" << b.hi << " m  objs=" << b.num_objects
           << " avgpts=" << b.avg_points_per_object << " F1=" << b.f1
           << " P=" << b.precision << " R=" << b.recall << "\n";
}

}  // namespace modisc::evalfuse
