#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modisc/losses.hpp"
#include "modisc/pcproj.hpp"
#include "modisc/pseudolabel.hpp"
#include "modisc/slotcore.hpp"
#include "modisc/synthgen.hpp"
#include "modisc/tensor.hpp"

namespace modisc::distill {

using losses::Modality;
using losses::Phase;

// teacher = EMA of student, per modality
struct ModelPair {
    slotcore::ModelParams teacher;
    slotcore::ModelParams student;
};

// theta_T' = keep_rate * theta_T + (1 - keep_rate) * theta_S
slotcore::ModelParams ema_update(const slotcore::ModelParams& teacher,
                                 const slotcore::ModelParams& student, double keep_rate);

// --- augmentation ---

struct AugmentConfig {
    double p_flip = 0.4;
    double p_crop = 0.4;
    double p_jitter = 0.4;
    double p_drop = 0.4;   // 3D only: extra valid-pixel drop
    double p_night = 0.0;  // 2D only: strong darkening
    double jitter_scale = 0.05;
    double drop_fraction = 0.1;
    double crop_min_scale = 0.7;
};

struct AugmentRecord {
    bool flip = false;
    bool crop = false;
    // crop window in relative [0,1] coordinates, resized back to full size
    double crop_x = 0.0, crop_y = 0.0, crop_w = 1.0, crop_h = 1.0;
    std::vector<std::string> photometric;
    std::uint64_t seed = 0;

    bool identity_geometry() const { return !flip && !crop; }
};

// 2D branch: flip, crop-resize, photometric jitter, optional darkening.
std::pair<Tensor, AugmentRecord> augment_frame(const Tensor& frame,
                                               const AugmentConfig& cfg,
                                               std::uint64_t seed);

// 3D branch: flip, crop-resize, value jitter on valid pixels, extra drop.
std::pair<pcproj::FrontViewImage, AugmentRecord> augment_front_view(
    const pcproj::FrontViewImage& fv, const AugmentConfig& cfg, std::uint64_t seed);

// Geometric component of a record applied to targets; photometric ops
// are ignored.
pseudolabel::Mask align_mask(const pseudolabel::Mask& mask, const AugmentRecord& record);
pseudolabel::MaskSet align_targets(const pseudolabel::MaskSet& targets,
                                   const AugmentRecord& record);
pcproj::FrontViewImage align_front_view(const pcproj::FrontViewImage& fv,
                                        const AugmentRecord& record);

// --- data ---

struct FrameData {
    Tensor rgb;                         // [3,H,W]
    pcproj::FrontViewImage fv_raw;      // metric channels, for banded eval
    pcproj::FrontViewImage fv_norm;     // min-max normalized
    pseudolabel::MaskSet motion;        // image resolution
    pseudolabel::LabelGrid gt;          // image resolution
};

struct SceneFrames {
    std::string dir;
    std::vector<FrameData> frames;
};

struct Dataset {
    std::vector<SceneFrames> scenes;
    pcproj::ChannelStats stats;

    // Loads every scene in the manifest, projects clouds to front views
    // and normalizes them. If stats is unset, dataset-wide min/max are
    // computed first.
    static Dataset load(const std::string& manifest_path, int height, int width,
                        std::optional<pcproj::ChannelStats> stats = std::nullopt);
};

// --- training ---

struct TrainConfig {
    slotcore::ModelConfig model2d;  // in_channels 3
    slotcore::ModelConfig model3d;  // in_channels 4
    int burn_in_steps = 2000;
    int distill_steps = 2000;
    int batch_size = 1;
    int seq_len = 5;  // T
    double learning_rate = 4e-4;
    double keep_rate = 0.996;
    double drop_ratio = 0.2;       // completion input drop
    bool enable_completion = true; // off for dense-depth variant
    double conf_threshold = 0.7;
    int min_area = 16;             // image-resolution pixels
    double motion_weight = 1.0;
    double recon_weight = 1.0;
    double completion_weight = 1.0;
    double background_weight = 1.0;
    double distill_weight = 1.0;
    AugmentConfig augment2d;
    AugmentConfig augment3d;
    std::uint64_t seed = 0;

    int feature_min_area() const { return std::max(1, min_area / 16); }
};

struct LossReport {
    int step = 0;
    Phase phase = Phase::burn_in;
    std::vector<std::pair<std::string, double>> terms;

    double term(const std::string& label) const;
    bool has_term(const std::string& label) const;
};

struct AdamState {
    std::vector<Tensor> m, v;
    int t = 0;
};

struct TrainState {
    ModelPair pair2d;
    ModelPair pair3d;
    AdamState adam2d;
    AdamState adam3d;
    Phase phase = Phase::burn_in;
    int step = 0;
    double keep_rate = 0.996;
    std::uint64_t rng_seed = 0;
};

// One sequence of aligned per-frame data for one step.
struct SeqBatch2D {
    std::vector<Tensor> frames;
    std::vector<pseudolabel::MaskSet> motion;  // image resolution
};
struct SeqBatch3D {
    std::vector<pcproj::FrontViewImage> fv;    // normalized, undropped
    std::vector<pseudolabel::MaskSet> motion;  // image resolution, unfiltered
};

// Students optimized on branch losses only; teachers EMA-updated.
LossReport burn_in_step(const std::vector<SeqBatch2D>& batch2d,
                        const std::vector<SeqBatch3D>& batch3d, TrainState& state,
                        const TrainConfig& cfg);

// Adds cross-modal teacher candidates, aligned to the other branch's
// student augmentation. Intra-modal distillation is never emitted.
LossReport distill_step(const std::vector<SeqBatch2D>& batch2d,
                        const std::vector<SeqBatch3D>& batch3d, TrainState& state,
                        const TrainConfig& cfg);

class Trainer {
public:
    Trainer(TrainConfig cfg, Dataset data);

    TrainState& state() { return state_; }
    const TrainConfig& config() const { return cfg_; }
    const Dataset& data() const { return data_; }

    Phase current_phase() const;
    bool done() const;
    LossReport step_once();

    void save(const std::string& dir) const;
    void restore(const std::string& dir);

private:
    std::pair<std::vector<SeqBatch2D>, std::vector<SeqBatch3D>> make_batch();

    TrainConfig cfg_;
    Dataset data_;
    TrainState state_;
};

void append_loss_log(const LossReport& report, const std::string& path);

}  // namespace modisc::distill
