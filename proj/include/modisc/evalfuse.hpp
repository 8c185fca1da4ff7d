#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "modisc/pcproj.hpp"
#include "modisc/pseudolabel.hpp"
#include "modisc/slotcore.hpp"
#include "modisc/tensor.hpp"

namespace modisc::evalfuse {

enum class PredModality { m2d, m3d, fused };

struct Prediction {
    pseudolabel::MaskSet masks;
    PredModality modality = PredModality::fused;
    int frame_id = 0;
};

struct BandRow {
    double lo = 0.0, hi = 0.0;  // meters
    double avg_points_per_object = 0.0;
    int num_objects = 0;
    double f1 = 0.0, precision = 0.0, recall = 0.0;
};

struct MetricsReport {
    double fg_ari = 0.0;
    double all_ari = 0.0;
    double f1_50 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::vector<BandRow> bands;
};

double iou(const pseudolabel::Mask& a, const pseudolabel::Mask& b);

// Runs a model over the sequence and turns each frame's attention into
// image-resolution instance masks (connected components of binarized
// slots, filtered by area and confidence).
std::vector<Prediction> predict_video(const slotcore::ModelParams& params,
                                      const std::vector<Tensor>& frames,
                                      PredModality modality, int min_area = 16,
                                      double conf_threshold = 0.7);

// Keeps cross-modal mask pairs with IoU >= tau as pixel unions, pairing
// by maximum-total-IoU assignment; unpaired masks are discarded.
Prediction late_fuse(const Prediction& pred2d, const Prediction& pred3d, double tau);

// Adjusted Rand index from the pair-counting contingency formula. With
// foreground_only, restricted to pixels whose true label is > 0.
double ari(const pseudolabel::LabelGrid& pred, const pseudolabel::LabelGrid& truth,
           bool foreground_only);

struct F1Result {
    double f1 = 0.0, precision = 0.0, recall = 0.0;
    int tp = 0, fp = 0, fn = 0;
};

// Greedy one-to-one matching by descending IoU; pairs at or above the
// threshold are true positives.
F1Result f1_at_iou(const Prediction& pred, const pseudolabel::MaskSet& gt,
                   double iou_threshold);

struct Band {
    double lo = 0.0, hi = 0.0;
};

std::vector<Band> default_bands();  // 0-10, 10-30, 30-70 m

// Per-band F1 with GT objects assigned to bands by median valid-pixel
// distance; objects without valid pixels fall into the farthest band.
std::vector<BandRow> banded_eval(const Prediction& pred, const pseudolabel::MaskSet& gt,
                                 const pcproj::FrontViewImage& fv,
                                 const std::vector<Band>& bands,
                                 double iou_threshold = 0.5);

// Cross-frame aggregation: ARI averaged per frame, F1 from pooled
// TP/FP/FN counts.
class EvalAccumulator {
public:
    void add_frame(const Prediction& pred, const pseudolabel::LabelGrid& gt_labels,
                   double iou_threshold = 0.5);
    MetricsReport report() const;

private:
    double fg_ari_sum_ = 0.0, all_ari_sum_ = 0.0;
    int frames_ = 0;
    int tp_ = 0, fp_ = 0, fn_ = 0;
};

void write_report_csv(const MetricsReport& report, std::ostream& os);
void print_report(const MetricsReport& report, std::ostream& os);

}  // namespace modisc::evalfuse
