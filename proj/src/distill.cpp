#include "modisc/distill.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

namespace modisc::distill {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t step_seed(std::uint64_t base, int step, int salt) {
    return splitmix64(base ^ splitmix64(static_cast<std::uint64_t>(step) * 1000003ull +
                                        static_cast<std::uint64_t>(salt)));
}

}  // namespace

slotcore::ModelParams ema_update(const slotcore::ModelParams& teacher,
                                 const slotcore::ModelParams& student, double keep_rate) {
    if (keep_rate < 0.0 || keep_rate >= 1.0)
        throw std::invalid_argument("ema_update: keep_rate outside [0,1)");
    if (teacher.tensors.size() != student.tensors.size())
        throw std::invalid_argument("ema_update: parameter count mismatch");
    slotcore::ModelParams out = teacher;
    for (std::size_t i = 0; i < out.tensors.size(); ++i) {
        const auto& [tn, tt] = teacher.tensors[i];
        const auto& [sn, st] = student.tensors[i];
        if (tn != sn || !tt.same_shape(st))
            throw std::invalid_argument("ema_update: mismatch at tensor '" + tn + "'");
        Tensor& dst = out.tensors[i].second;
        for (std::int64_t j = 0; j < dst.numel(); ++j)
            dst[j] = keep_rate * tt[j] + (1.0 - keep_rate) * st[j];
    }
    return out;
}

// --- augmentation ---

namespace {

// Source pixel for output (i,j) under the geometric part of a record,
// expressed in relative coordinates so any resolution maps consistently.
std::pair<int, int> source_pixel(const AugmentRecord& rec, int i, int j, int h, int w) {
    double ry = (i + 0.5) / h;
    double rx = (j + 0.5) / w;
    if (rec.crop) {
        ry = rec.crop_y + ry * rec.crop_h;
        rx = rec.crop_x + rx * rec.crop_w;
    }
    if (rec.flip) rx = 1.0 - rx;
    int si = std::clamp(static_cast<int>(ry * h), 0, h - 1);
    int sj = std::clamp(static_cast<int>(rx * w), 0, w - 1);
    return {si, sj};
}

AugmentRecord sample_geometry(const AugmentConfig& cfg, std::mt19937_64& rng,
                              std::uint64_t seed) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentRecord rec;
    rec.seed = seed;
    rec.flip = unit(rng) < cfg.p_flip;
    if (unit(rng) < cfg.p_crop) {
        rec.crop = true;
        const double scale = cfg.crop_min_scale + unit(rng) * (1.0 - cfg.crop_min_scale);
        rec.crop_w = scale;
        rec.crop_h = scale;
        rec.crop_x = unit(rng) * (1.0 - scale);
        rec.crop_y = unit(rng) * (1.0 - scale);
    }
    return rec;
}

Tensor apply_geometry_tensor(const Tensor& img, const AugmentRecord& rec) {
    if (rec.identity_geometry()) return img;
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out({c, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const auto [si, sj] = source_pixel(rec, i, j, h, w);
            for (int ch = 0; ch < c; ++ch) out.at(ch, i, j) = img.at(ch, si, sj);
        }
    return out;
}

}  // namespace

std::pair<Tensor, AugmentRecord> augment_frame(const Tensor& frame, const AugmentConfig& cfg,
                                               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentRecord rec = sample_geometry(cfg, rng, seed);
    Tensor out = apply_geometry_tensor(frame, rec);
    if (unit(rng) < cfg.p_jitter) {
        rec.photometric.push_back("jitter");
        const double brightness = (unit(rng) - 0.5) * 0.2;
        const double contrast = 0.9 + unit(rng) * 0.2;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < out.dim(1); ++i)
                for (int j = 0; j < out.dim(2); ++j)
                    out.at(c, i, j) = std::clamp(
                        (out.at(c, i, j) - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0);
    }
    if (unit(rng) < cfg.p_night) {
        rec.photometric.push_back("night");
        const double strength = 0.7 + unit(rng) * 0.25;
        for (auto& v : out.vec()) v *= (1.0 - strength);
    }
    return {std::move(out), std::move(rec)};
}

std::pair<pcproj::FrontViewImage, AugmentRecord> augment_front_view(
    const pcproj::FrontViewImage& fv, const AugmentConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentRecord rec = sample_geometry(cfg, rng, seed);
    pcproj::FrontViewImage out = align_front_view(fv, rec);
    if (unit(rng) < cfg.p_jitter) {
        rec.photometric.push_back("jitter");
        std::normal_distribution<double> noise(0.0, cfg.jitter_scale);
        for (const auto& [i, j] : out.valid_set)
            for (int c = 0; c < 4; ++c) out.channels.at(c, i, j) += noise(rng);
    }
    if (unit(rng) < cfg.p_drop) {
        rec.photometric.push_back("drop");
        auto [dropped, drop_rec] =
            pcproj::drop_points(out, cfg.drop_fraction, splitmix64(seed ^ 0xd1f2u));
        out = std::move(dropped);
    }
    return {std::move(out), std::move(rec)};
}

pseudolabel::Mask align_mask(const pseudolabel::Mask& mask, const AugmentRecord& record) {
    if (record.identity_geometry()) return mask;
    pseudolabel::Mask out(mask.h, mask.w);
    for (int i = 0; i < mask.h; ++i)
        for (int j = 0; j < mask.w; ++j) {
            const auto [si, sj] = source_pixel(record, i, j, mask.h, mask.w);
            out.at(i, j) = mask.at(si, sj);
        }
    return out;
}

pseudolabel::MaskSet align_targets(const pseudolabel::MaskSet& targets,
                                   const AugmentRecord& record) {
    pseudolabel::MaskSet out;
    out.frame_id = targets.frame_id;
    out.scores = targets.scores;
    for (const auto& m : targets.masks) out.masks.push_back(align_mask(m, record));
    return out;
}

pcproj::FrontViewImage align_front_view(const pcproj::FrontViewImage& fv,
                                        const AugmentRecord& record) {
    if (record.identity_geometry()) return fv;
    pcproj::FrontViewImage out;
    out.height = fv.height;
    out.width = fv.width;
    out.fill = fv.fill;
    out.channels = Tensor::full({4, fv.height, fv.width}, fv.fill);
    for (int i = 0; i < fv.height; ++i)
        for (int j = 0; j < fv.width; ++j) {
            const auto [si, sj] = source_pixel(record, i, j, fv.height, fv.width);
            if (!fv.valid(si, sj)) continue;
            out.valid_set.insert({i, j});
            for (int c = 0; c < 4; ++c) out.channels.at(c, i, j) = fv.channels.at(c, si, sj);
        }
    return out;
}

// --- data ---

Dataset Dataset::load(const std::string& manifest_path, int height, int width,
                      std::optional<pcproj::ChannelStats> stats) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(manifest_path).parent_path();
    Dataset ds;
    for (const synthgen::ManifestEntry& entry : synthgen::load_manifest(manifest_path)) {
        SceneFrames scene;
        scene.dir = (base / entry.scene_dir).string();
        const pcproj::Calibration calib = pcproj::load_calibration(scene.dir + "/calib.txt");
        for (int t = 0; t < entry.frames; ++t) {
            const std::string idx = (t < 10 ? "0" : "") + std::to_string(t);
            FrameData fd;
            fd.rgb = synthgen::load_ppm(scene.dir + "/frame_" + idx + ".ppm");
            if (fd.rgb.dim(1) != height || fd.rgb.dim(2) != width)
                throw std::runtime_error("dataset: frame size mismatch in " + scene.dir);
            const pcproj::PointCloud cloud =
                pcproj::load_point_cloud(scene.dir + "/cloud_" + idx + ".bin");
            fd.fv_raw = pcproj::project_front_view(cloud, calib, height, width);
            fd.gt = pseudolabel::load_label_pgm(scene.dir + "/gt_" + idx + ".pgm");
            fd.motion = pseudolabel::masks_from_labels(
                pseudolabel::load_label_pgm(scene.dir + "/motion_" + idx + ".pgm"));
            scene.frames.push_back(std::move(fd));
        }
        ds.scenes.push_back(std::move(scene));
    }
    if (stats) {
        ds.stats = *stats;
    } else {
        bool first = true;
        for (const auto& scene : ds.scenes)
            for (const auto& fd : scene.frames)
                pcproj::accumulate_stats(fd.fv_raw, ds.stats, first);
        if (first) throw std::runtime_error("dataset: no valid front-view pixels anywhere");
    }
    for (auto& scene : ds.scenes)
        for (auto& fd : scene.frames)
            fd.fv_norm = pcproj::normalize_front_view(fd.fv_raw, ds.stats);
    return ds;
}

// --- loss assembly ---

namespace {

// Majority pooling when the factor is integral (unbiased boundaries for
// supervision targets), nearest otherwise.
pseudolabel::Mask downsample_mask(const pseudolabel::Mask& m, int fh, int fw) {
    if (fh > 0 && fw > 0 && m.h % fh == 0 && m.w % fw == 0) {
        const int bh = m.h / fh, bw = m.w / fw;
        pseudolabel::Mask small(fh, fw);
        for (int i = 0; i < fh; ++i)
            for (int j = 0; j < fw; ++j) {
                int on = 0;
                for (int a = 0; a < bh; ++a)
                    for (int b = 0; b < bw; ++b) on += m.at(i * bh + a, j * bw + b);
                small.at(i, j) = 2 * on >= bh * bw;
            }
        return small;
    }
    return pseudolabel::resize_nearest(m, fh, fw);
}

pseudolabel::MaskSet to_feature_res(const pseudolabel::MaskSet& image_res, int fh, int fw) {
    pseudolabel::MaskSet out;
    out.frame_id = image_res.frame_id;
    for (const auto& m : image_res.masks) {
        pseudolabel::Mask small = downsample_mask(m, fh, fw);
        if (!small.empty()) out.masks.push_back(std::move(small));
    }
    return out;
}

struct BranchLoss {
    ad::Var total;
    std::vector<std::pair<std::string, double>> terms;
};

// fraction of `a` covered by `b`
double mask_containment(const pseudolabel::Mask& a, const pseudolabel::Mask& b) {
    int inter = 0, area = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] && b.data[i];
        area += a.data[i];
    }
    return area == 0 ? 0.0 : static_cast<double>(inter) / area;
}

// Losses of one student over one sequence. Inputs are already augmented
// and targets already aligned to the student view, at feature resolution
// for masks.
BranchLoss branch_loss(const slotcore::Model& student, Modality branch, Phase phase,
                       const TrainConfig& cfg, const std::vector<Tensor>& inputs,
                       const std::vector<pseudolabel::MaskSet>& motion_feat,
                       const std::vector<std::vector<losses::SupervisionTarget>>& dist_targets,
                       const std::vector<pcproj::FrontViewImage>* completion_targets) {
    const slotcore::ModelConfig& mc = student.config();
    const int k = mc.num_slots;
    const auto frames = student.forward_video(inputs);

    ad::Var motion_sum, dist_sum, bg_sum, rec_sum;
    int motion_count = 0, dist_count = 0;
    auto acc = [](ad::Var& dst, const ad::Var& term) {
        dst = dst ? ad::add(dst, term) : term;
    };

    for (std::size_t t = 0; t < frames.size(); ++t) {
        const auto& fo = frames[t];

        // pool motion masks and cross-modal candidates into one target set
        std::vector<losses::SupervisionTarget> pool;
        for (const auto& m : motion_feat[t].masks) {
            losses::SupervisionTarget st;
            st.mask = m;
            // motion cues are trusted regularization targets: full confidence,
            // independent of the model's current foreground estimate
            st.confidence = 1.0;
            st.source = branch == Modality::m2d ? losses::TargetSource::motion2d
                                                : losses::TargetSource::motion3d;
            pool.push_back(std::move(st));
        }
        // teacher candidates extend the motion set with objects the motion
        // cue missed; a candidate lying mostly on a motion mask is the same
        // object (or a fragment of it) rediscovered, and keeping both would
        // force a slot split
        const std::size_t n_motion = pool.size();
        if (t < dist_targets.size())
            for (const auto& st : dist_targets[t]) {
                bool duplicate = false;
                for (std::size_t m = 0; m < n_motion && !duplicate; ++m)
                    duplicate = mask_containment(st.mask, pool[m].mask) >= 0.3;
                if (!duplicate) pool.push_back(st);
            }
        if (static_cast<int>(pool.size()) > k) {
            std::stable_sort(pool.begin(), pool.end(),
                             [](const auto& a, const auto& b) {
                                 return a.confidence > b.confidence;
                             });
            pool.resize(static_cast<std::size_t>(k));
        }

        pseudolabel::MaskSet pool_masks;
        for (const auto& st : pool) pool_masks.masks.push_back(st.mask);
        const auto assignment = pseudolabel::match(pool_masks, fo.maps);

        std::vector<std::uint8_t> covered(static_cast<std::size_t>(mc.num_positions()), 0);
        for (const auto& [mask_idx, slot_idx] : assignment) {
            const auto& st = pool[static_cast<std::size_t>(mask_idx)];
            const ad::Var col = ad::select_column(fo.attention, slot_idx);
            const ad::Var bce = losses::weighted_bce(st, col);
            const bool is_motion = st.source == losses::TargetSource::motion2d ||
                                   st.source == losses::TargetSource::motion3d;
            if (is_motion) {
                acc(motion_sum, bce);
                ++motion_count;
            } else {
                acc(dist_sum, bce);
                ++dist_count;
            }
            for (std::size_t i = 0; i < st.mask.data.size(); ++i)
                if (st.mask.data[i]) covered[i] = 1;
        }

        if (mc.background_slot) {
            const ad::Var bg_col = ad::select_column(fo.attention, k);
            acc(bg_sum, losses::background_nll(bg_col, covered));
        }

        if (branch == Modality::m2d) {
            acc(rec_sum, ad::mse_against(fo.decoded, inputs[t]));
        } else if (completion_targets) {
            acc(rec_sum, losses::completion_mse(fo.decoded, (*completion_targets)[t]));
        }
    }

    const double tn = static_cast<double>(frames.size());
    std::vector<losses::LossTerm> parts;
    BranchLoss out;
    auto record = [&out](const std::string& label, const ad::Var& v, double w) {
        out.terms.emplace_back(label, v->value[0] * w);
    };
    if (motion_sum && motion_count > 0) {
        auto v = ad::scale(motion_sum, 1.0 / motion_count);
        parts.push_back({"motion", v, cfg.motion_weight, std::nullopt, std::nullopt});
        record("motion", v, cfg.motion_weight);
    }
    if (dist_sum && dist_count > 0) {
        const Modality source = branch == Modality::m2d ? Modality::m3d : Modality::m2d;
        const std::string label = std::string("dist_") + losses::modality_name(source) +
                                  "_to_" + losses::modality_name(branch);
        auto v = ad::scale(dist_sum, 1.0 / dist_count);
        parts.push_back({label, v, cfg.distill_weight, source, branch});
        record(label, v, cfg.distill_weight);
    }
    if (bg_sum) {
        auto v = ad::scale(bg_sum, 1.0 / tn);
        parts.push_back({"background", v, cfg.background_weight, std::nullopt, std::nullopt});
        record("background", v, cfg.background_weight);
    }
    if (rec_sum) {
        const bool is2d = branch == Modality::m2d;
        auto v = ad::scale(rec_sum, 1.0 / tn);
        parts.push_back({is2d ? "recon" : "completion", v,
                         is2d ? cfg.recon_weight : cfg.completion_weight, std::nullopt,
                         std::nullopt});
        record(is2d ? "recon" : "completion", v, is2d ? cfg.recon_weight : cfg.completion_weight);
    }
    out.total = losses::total_loss(branch, phase, parts);
    return out;
}

void adam_init(AdamState& st, const slotcore::ModelParams& params) {
    if (!st.m.empty()) return;
    for (const auto& [name, t] : params.tensors) {
        st.m.push_back(Tensor::zeros(t.shape()));
        st.v.push_back(Tensor::zeros(t.shape()));
    }
}

void adam_update(slotcore::ModelParams& params, const std::vector<Tensor>& grads,
                 AdamState& st, double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    adam_init(st, params);
    ++st.t;
    const double bc1 = 1.0 - std::pow(beta1, st.t);
    const double bc2 = 1.0 - std::pow(beta2, st.t);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        Tensor& p = params.tensors[i].second;
        const Tensor& g = grads[i];
        Tensor& m = st.m[i];
        Tensor& v = st.v[i];
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

double cosine_lr(const TrainConfig& cfg, int step) {
    const int total = cfg.burn_in_steps + cfg.distill_steps;
    if (total <= 0) return cfg.learning_rate;
    const double x = std::min(1.0, static_cast<double>(step) / total);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(x * 3.14159265358979323846));
}

Tensor fv_tensor(const pcproj::FrontViewImage& fv) { return fv.channels; }

struct PreparedSeq3D {
    std::vector<Tensor> inputs;
    std::vector<pseudolabel::MaskSet> motion_feat;
    std::vector<pcproj::FrontViewImage> completion_targets;
    AugmentRecord record;
};

struct PreparedSeq2D {
    std::vector<Tensor> inputs;
    std::vector<pseudolabel::MaskSet> motion_feat;
    AugmentRecord record;
};

PreparedSeq2D prepare_2d(const SeqBatch2D& seq, const TrainConfig& cfg, bool strong_aug,
                         std::uint64_t seed) {
    PreparedSeq2D out;
    if (strong_aug) {
        // one geometric record per sequence to keep the recurrence aligned
        auto [first, rec] = augment_frame(seq.frames[0], cfg.augment2d, seed);
        out.record = rec;
        out.inputs.push_back(std::move(first));
        for (std::size_t t = 1; t < seq.frames.size(); ++t)
            out.inputs.push_back(augment_frame(seq.frames[t], cfg.augment2d, seed).first);
    } else {
        out.inputs = seq.frames;
    }
    const int fh = cfg.model2d.feat_h(), fw = cfg.model2d.feat_w();
    for (const auto& m : seq.motion)
        out.motion_feat.push_back(to_feature_res(align_targets(m, out.record), fh, fw));
    return out;
}

PreparedSeq3D prepare_3d(const SeqBatch3D& seq, const TrainConfig& cfg, bool strong_aug,
                         std::uint64_t seed) {
    PreparedSeq3D out;
    const int fh = cfg.model3d.feat_h(), fw = cfg.model3d.feat_w();
    for (std::size_t t = 0; t < seq.fv.size(); ++t) {
        const pcproj::FrontViewImage& full = seq.fv[t];
        pcproj::FrontViewImage input = full;
        if (cfg.enable_completion)
            input = pcproj::drop_points(full, cfg.drop_ratio,
                                        splitmix64(seed + 31ull * t))
                        .first;
        if (strong_aug) {
            auto [aug, rec] = augment_front_view(input, cfg.augment3d, seed);
            if (t == 0) out.record = rec;
            input = std::move(aug);
        }
        out.inputs.push_back(fv_tensor(input));
        out.completion_targets.push_back(align_front_view(full, out.record));
        // Eq. 1 filtering against the full projection, then alignment
        pseudolabel::MaskSet filtered = pseudolabel::filter_motion_masks(seq.motion[t], full);
        out.motion_feat.push_back(
            to_feature_res(align_targets(filtered, out.record), fh, fw));
    }
    return out;
}

// Candidates from a teacher frame, mapped into the other student's view.
std::vector<losses::SupervisionTarget> cross_targets(
    const AttentionMaps& teacher_maps, const TrainConfig& cfg,
    const AugmentRecord& student_record, int image_h, int image_w, int fh, int fw,
    losses::TargetSource source) {
    std::vector<losses::SupervisionTarget> out;
    for (const pseudolabel::Candidate& cand : pseudolabel::extract_candidates(
             teacher_maps, cfg.feature_min_area(), cfg.conf_threshold)) {
        pseudolabel::Mask full = pseudolabel::resize_nearest(cand.mask, image_h, image_w);
        full = align_mask(full, student_record);
        pseudolabel::Mask feat = downsample_mask(full, fh, fw);
        if (feat.empty()) continue;
        losses::SupervisionTarget st;
        st.mask = std::move(feat);
        st.confidence = cand.confidence;
        st.source = source;
        out.push_back(std::move(st));
    }
    return out;
}

LossReport run_step(const std::vector<SeqBatch2D>& batch2d,
                    const std::vector<SeqBatch3D>& batch3d, TrainState& state,
                    const TrainConfig& cfg, Phase phase) {
    if (batch2d.size() != batch3d.size() || batch2d.empty())
        throw std::invalid_argument("train step: batches must be nonempty and paired");
    const double lr = cosine_lr(cfg, state.step);
    const int n = static_cast<int>(batch2d.size());

    LossReport report;
    report.step = state.step;
    report.phase = phase;
    auto add_terms = [&report](const std::string& prefix,
                               const std::vector<std::pair<std::string, double>>& terms,
                               double scale) {
        for (const auto& [label, v] : terms) {
            const std::string key = prefix + label;
            bool found = false;
            for (auto& [l, acc] : report.terms)
                if (l == key) {
                    acc += v * scale;
                    found = true;
                }
            if (!found) report.terms.emplace_back(key, v * scale);
        }
    };

    slotcore::Model student2d(state.pair2d.student, true);
    slotcore::Model student3d(state.pair3d.student, true);
    double total2d = 0.0, total3d = 0.0;

    for (int b = 0; b < n; ++b) {
        const std::uint64_t seed2d = step_seed(state.rng_seed, state.step, 2 * b);
        const std::uint64_t seed3d = step_seed(state.rng_seed, state.step, 2 * b + 1);
        // students always see augmented views; teachers (below) never do.
        // night degradation belongs to the distillation recipe: the 2D
        // student recovers darkened frames from the 3D teacher's candidates,
        // while burn-in trains on daylight only
        const bool strong = true;
        TrainConfig cfg2d = cfg;
        if (phase == Phase::burn_in) cfg2d.augment2d.p_night = 0.0;
        PreparedSeq2D in2d = prepare_2d(batch2d[static_cast<std::size_t>(b)], cfg2d, strong, seed2d);
        PreparedSeq3D in3d = prepare_3d(batch3d[static_cast<std::size_t>(b)], cfg, strong, seed3d);

        std::vector<std::vector<losses::SupervisionTarget>> dist2d, dist3d;
        if (phase == Phase::distill) {
            // teachers see unaugmented, undropped inputs
            slotcore::Model teacher2d(state.pair2d.teacher, false);
            slotcore::Model teacher3d(state.pair3d.teacher, false);
            const auto t2 =
                teacher2d.forward_video(batch2d[static_cast<std::size_t>(b)].frames);
            std::vector<Tensor> fv_full;
            for (const auto& fv : batch3d[static_cast<std::size_t>(b)].fv)
                fv_full.push_back(fv_tensor(fv));
            const auto t3 = teacher3d.forward_video(fv_full);
            const int h = cfg.model2d.height, w = cfg.model2d.width;
            for (std::size_t t = 0; t < t2.size(); ++t) {
                // 2D teacher supervises the 3D student and vice versa
                dist3d.push_back(cross_targets(t2[t].maps, cfg, in3d.record, h, w,
                                               cfg.model3d.feat_h(), cfg.model3d.feat_w(),
                                               losses::TargetSource::teacher2d));
                dist2d.push_back(cross_targets(t3[t].maps, cfg, in2d.record, h, w,
                                               cfg.model2d.feat_h(), cfg.model2d.feat_w(),
                                               losses::TargetSource::teacher3d));
            }
        }

        BranchLoss l2d = branch_loss(student2d, Modality::m2d, phase, cfg, in2d.inputs,
                                     in2d.motion_feat, dist2d, nullptr);
        BranchLoss l3d = branch_loss(student3d, Modality::m3d, phase, cfg, in3d.inputs,
                                     in3d.motion_feat, dist3d,
                                     cfg.enable_completion ? &in3d.completion_targets : nullptr);
        if (!std::isfinite(l2d.total->value[0]) || !std::isfinite(l3d.total->value[0]))
            throw std::runtime_error("non-finite loss at step " + std::to_string(state.step));
        total2d += l2d.total->value[0];
        total3d += l3d.total->value[0];
        ad::backward(l2d.total);
        ad::backward(l3d.total);
        add_terms("2d_", l2d.terms, 1.0 / n);
        add_terms("3d_", l3d.terms, 1.0 / n);
    }

    auto grads2d = student2d.collect_gradients();
    auto grads3d = student3d.collect_gradients();
    if (n > 1) {
        for (auto& g : grads2d)
            for (auto& v : g.vec()) v /= n;
        for (auto& g : grads3d)
            for (auto& v : g.vec()) v /= n;
    }
    adam_update(state.pair2d.student, grads2d, state.adam2d, lr);
    adam_update(state.pair3d.student, grads3d, state.adam3d, lr);
    state.pair2d.teacher =
        ema_update(state.pair2d.teacher, state.pair2d.student, state.keep_rate);
    state.pair3d.teacher =
        ema_update(state.pair3d.teacher, state.pair3d.student, state.keep_rate);

    report.terms.emplace_back("2d_total", total2d / n);
    report.terms.emplace_back("3d_total", total3d / n);
    ++state.step;
    return report;
}

}  // namespace

double LossReport::term(const std::string& label) const {
    for (const auto& [l, v] : terms)
        if (l == label) return v;
    throw std::invalid_argument("LossReport: no term '" + label + "'");
}

bool LossReport::has_term(const std::string& label) const {
    for (const auto& [l, v] : terms)
        if (l == label) return true;
    return false;
}

LossReport burn_in_step(const std::vector<SeqBatch2D>& batch2d,
                        const std::vector<SeqBatch3D>& batch3d, TrainState& state,
                        const TrainConfig& cfg) {
    if (state.phase != Phase::burn_in)
        throw std::invalid_argument("burn_in_step: state not in burn-in phase");
    return run_step(batch2d, batch3d, state, cfg, Phase::burn_in);
}

LossReport distill_step(const std::vector<SeqBatch2D>& batch2d,
                        const std::vector<SeqBatch3D>& batch3d, TrainState& state,
                        const TrainConfig& cfg) {
    if (state.phase != Phase::distill)
        throw std::invalid_argument("distill_step: state not in distill phase");
    return run_step(batch2d, batch3d, state, cfg, Phase::distill);
}

// --- trainer ---

Trainer::Trainer(TrainConfig cfg, Dataset data) : cfg_(std::move(cfg)), data_(std::move(data)) {
    if (data_.scenes.empty()) throw std::invalid_argument("Trainer: empty dataset");
    state_.pair2d.student = slotcore::ModelParams::init(cfg_.model2d, splitmix64(cfg_.seed ^ 2));
    state_.pair2d.teacher = state_.pair2d.student;
    state_.pair3d.student = slotcore::ModelParams::init(cfg_.model3d, splitmix64(cfg_.seed ^ 3));
    state_.pair3d.teacher = state_.pair3d.student;
    state_.keep_rate = cfg_.keep_rate;
    state_.rng_seed = cfg_.seed;
}

Phase Trainer::current_phase() const {
    return state_.step < cfg_.burn_in_steps ? Phase::burn_in : Phase::distill;
}

bool Trainer::done() const { return state_.step >= cfg_.burn_in_steps + cfg_.distill_steps; }

std::pair<std::vector<SeqBatch2D>, std::vector<SeqBatch3D>> Trainer::make_batch() {
    std::vector<SeqBatch2D> b2;
    std::vector<SeqBatch3D> b3;
    for (int b = 0; b < cfg_.batch_size; ++b) {
        const std::uint64_t r = step_seed(state_.rng_seed, state_.step, 100 + b);
        const auto& scene =
            data_.scenes[static_cast<std::size_t>(r % data_.scenes.size())];
        const int avail = static_cast<int>(scene.frames.size());
        const int t_len = std::min(cfg_.seq_len, avail);
        const int start =
            avail > t_len ? static_cast<int>((r >> 32) % (avail - t_len + 1)) : 0;
        SeqBatch2D s2;
        SeqBatch3D s3;
        for (int t = start; t < start + t_len; ++t) {
            const FrameData& fd = scene.frames[static_cast<std::size_t>(t)];
            s2.frames.push_back(fd.rgb);
            s2.motion.push_back(fd.motion);
            s3.fv.push_back(fd.fv_norm);
            s3.motion.push_back(fd.motion);
        }
        b2.push_back(std::move(s2));
        b3.push_back(std::move(s3));
    }
    return {std::move(b2), std::move(b3)};
}

LossReport Trainer::step_once() {
    state_.phase = current_phase();
    auto [b2, b3] = make_batch();
    return state_.phase == Phase::burn_in ? burn_in_step(b2, b3, state_, cfg_)
                                          : distill_step(b2, b3, state_, cfg_);
}

void Trainer::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    slotcore::save_checkpoint(state_.pair2d.student, dir + "/student_2d.modc");
    slotcore::save_checkpoint(state_.pair2d.teacher, dir + "/teacher_2d.modc");
    slotcore::save_checkpoint(state_.pair3d.student, dir + "/student_3d.modc");
    slotcore::save_checkpoint(state_.pair3d.teacher, dir + "/teacher_3d.modc");
    std::vector<std::pair<std::string, Tensor>> extra;
    Tensor meta({3});
    meta[0] = state_.step;
    meta[1] = state_.adam2d.t;
    meta[2] = state_.adam3d.t;
    extra.emplace_back("__meta", std::move(meta));
    Tensor stats({8});
    for (int c = 0; c < 4; ++c) {
        stats[c] = data_.stats.min[static_cast<std::size_t>(c)];
        stats[c + 4] = data_.stats.max[static_cast<std::size_t>(c)];
    }
    extra.emplace_back("__stats", std::move(stats));
    auto dump_adam = [&extra](const AdamState& st, const slotcore::ModelParams& p,
                              const std::string& prefix) {
        for (std::size_t i = 0; i < st.m.size(); ++i) {
            extra.emplace_back(prefix + "_m_" + p.tensors[i].first, st.m[i]);
            extra.emplace_back(prefix + "_v_" + p.tensors[i].first, st.v[i]);
        }
    };
    dump_adam(state_.adam2d, state_.pair2d.student, "adam2d");
    dump_adam(state_.adam3d, state_.pair3d.student, "adam3d");
    slotcore::save_tensors(extra, dir + "/train_state.modc");
}

void Trainer::restore(const std::string& dir) {
    state_.pair2d.student = slotcore::load_checkpoint(cfg_.model2d, dir + "/student_2d.modc");
    state_.pair2d.teacher = slotcore::load_checkpoint(cfg_.model2d, dir + "/teacher_2d.modc");
    state_.pair3d.student = slotcore::load_checkpoint(cfg_.model3d, dir + "/student_3d.modc");
    state_.pair3d.teacher = slotcore::load_checkpoint(cfg_.model3d, dir + "/teacher_3d.modc");
    const auto extra = slotcore::load_tensors(dir + "/train_state.modc");
    state_.adam2d = AdamState{};
    state_.adam3d = AdamState{};
    adam_init(state_.adam2d, state_.pair2d.student);
    adam_init(state_.adam3d, state_.pair3d.student);
    for (const auto& [name, t] : extra) {
        if (name == "__meta") {
            state_.step = static_cast<int>(t[0]);
            state_.adam2d.t = static_cast<int>(t[1]);
            state_.adam3d.t = static_cast<int>(t[2]);
            continue;
        }
        if (name == "__stats") continue;
        auto fill = [&name, &t](AdamState& st, const slotcore::ModelParams& p,
                                const std::string& prefix) {
            for (std::size_t i = 0; i < p.tensors.size(); ++i) {
                if (name == prefix + "_m_" + p.tensors[i].first) st.m[i] = t;
                if (name == prefix + "_v_" + p.tensors[i].first) st.v[i] = t;
            }
        };
        fill(state_.adam2d, state_.pair2d.student, "adam2d");
        fill(state_.adam3d, state_.pair3d.student, "adam3d");
    }
    state_.phase = current_phase();
}

void append_loss_log(const LossReport& report, const std::string& path) {
    const bool exists = std::filesystem::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw std::runtime_error("cannot open loss log: " + path);
    if (!exists) f << "step,phase,term,value\n";
    f.precision(17);
    for (const auto& [label, v] : report.terms)
        f << report.step << "," << (report.phase == Phase::burn_in ? "burn_in" : "distill")
          << "," << label << "," << v << "\n";
}

}  // namespace modisc::distill
