#include "modisc/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "modisc/distill.hpp"
#include "modisc/evalfuse.hpp"
#include "modisc/pcproj.hpp"
#include "modisc/pseudolabel.hpp"
#include "modisc/slotcore.hpp"
#include "modisc/synthgen.hpp"

namespace fs = std::filesystem;

namespace modisc::cli {

int verbosity() {
    const char* v = std::getenv("MODISC_VERBOSE");
    if (!v) return 0;
    try {
        return std::stoi(v);
    } catch (const std::exception&) {
        return 1;
    }
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    a ^= b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2);
    return a;
}

std::string frame_name(int scene, int frame) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%03d_f%02d", scene, frame);
    return buf;
}

slotcore::ModelConfig model_config(const RunConfig& cfg, int in_channels) {
    slotcore::ModelConfig mc;
    mc.in_channels = in_channels;
    mc.out_channels = in_channels;
    mc.height = static_cast<int>(cfg.integer("height", 64));
    mc.width = static_cast<int>(cfg.integer("width", 128));
    mc.feat_dim = static_cast<int>(cfg.integer("feat_dim", 64));
    mc.num_slots = static_cast<int>(cfg.integer("num_slots", 4));
    mc.enc_c1 = static_cast<int>(cfg.integer("enc_c1", 16));
    mc.enc_c2 = static_cast<int>(cfg.integer("enc_c2", 32));
    if (mc.height % 4 || mc.width % 4)
        throw UsageError("height and width must be multiples of 4");
    return mc;
}

std::vector<std::string> sorted_pgms(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm")
            names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

pcproj::ChannelStats load_stats(const std::string& checkpoint_dir) {
    const auto tensors = slotcore::load_tensors(checkpoint_dir + "/train_state.modc");
    for (const auto& [name, t] : tensors)
        if (name == "__stats") {
            pcproj::ChannelStats st;
            for (int c = 0; c < 4; ++c) {
                st.min[static_cast<std::size_t>(c)] = t[c];
                st.max[static_cast<std::size_t>(c)] = t[c + 4];
            }
            return st;
        }
    throw DataError("no channel stats in " + checkpoint_dir + "/train_state.modc");
}

}  // namespace

void cmd_gen(const RunConfig& config) {
    config.restrict_keys({"out_dir", "num_scenes", "seed", "frames", "height", "width",
                          "objects_min", "objects_max", "moving_min", "moving_max",
                          "row_subsample", "focal", "degrade_mode", "degrade_strength",
                          "flat_export", "min_half_size", "max_half_size"});
    const std::string out_dir = config.str_required("out_dir");
    const int num_scenes = static_cast<int>(config.integer("num_scenes", -1));
    if (num_scenes < 0) throw UsageError("num_scenes must be >= 0");
    const auto seed = static_cast<std::uint64_t>(config.integer("seed", 0));
    const int objects_min = static_cast<int>(config.integer("objects_min", 2));
    const int objects_max = static_cast<int>(config.integer("objects_max", 4));
    const int moving_min = static_cast<int>(config.integer("moving_min", 1));
    const int moving_max = static_cast<int>(config.integer("moving_max", 3));
    if (objects_min < 1 || objects_max < objects_min || moving_min < 1)
        throw UsageError("invalid object count range");
    const std::string degrade_mode = config.str("degrade_mode", "none");
    const double degrade_strength = config.real("degrade_strength", 0.0);
    if (degrade_mode != "none" && degrade_mode != "night" && degrade_mode != "low_reflectivity")
        throw UsageError("degrade_mode must be none, night or low_reflectivity");
    const bool flat_export = config.boolean("flat_export", true);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output dir: " + out_dir);
    if (flat_export) {
        fs::create_directories(out_dir + "/gt_flat");
        fs::create_directories(out_dir + "/fv_flat");
        fs::create_directories(out_dir + "/motion_flat");
    }

    std::vector<synthgen::ManifestEntry> entries;
    for (int s = 0; s < num_scenes; ++s) {
        synthgen::SceneSpec spec;
        spec.seed = mix(seed, static_cast<std::uint64_t>(s) + 1);
        spec.frames = static_cast<int>(config.integer("frames", 5));
        spec.height = static_cast<int>(config.integer("height", 64));
        spec.width = static_cast<int>(config.integer("width", 128));
        spec.row_subsample = static_cast<int>(config.integer("row_subsample", 2));
        spec.focal_x = spec.focal_y = config.real("focal", 100.0);
        spec.min_half_size = static_cast<int>(config.integer("min_half_size", 6));
        spec.max_half_size = static_cast<int>(config.integer("max_half_size", 13));
        std::mt19937_64 rng(mix(spec.seed, 0x5ce11eull));
        spec.n_objects =
            objects_min + static_cast<int>(rng() % static_cast<std::uint64_t>(
                                                       objects_max - objects_min + 1));
        const int mv_hi = std::min(moving_max, spec.n_objects);
        const int mv_lo = std::min(moving_min, mv_hi);
        spec.n_moving =
            mv_lo + static_cast<int>(rng() % static_cast<std::uint64_t>(mv_hi - mv_lo + 1));
        if (degrade_mode == "low_reflectivity") spec.low_reflectivity_object = 0;

        synthgen::SceneBundle bundle = synthgen::generate(spec);
        if (degrade_mode == "night")
            bundle = synthgen::degrade(bundle, synthgen::DegradeMode::night, degrade_strength);
        else if (degrade_mode == "low_reflectivity")
            bundle = synthgen::degrade(bundle, synthgen::DegradeMode::low_reflectivity,
                                       degrade_strength);

        char scene_name[32];
        std::snprintf(scene_name, sizeof(scene_name), "scene_%04d", s);
        synthgen::write_scene(bundle, out_dir + "/" + scene_name);
        entries.push_back({scene_name, spec.frames});

        if (flat_export)
            for (int t = 0; t < spec.frames; ++t) {
                const std::string stem = frame_name(s, t);
                pseudolabel::save_label_pgm(
                    bundle.gt[static_cast<std::size_t>(t)],
                    out_dir + "/gt_flat/" + stem + ".pgm");
                pseudolabel::save_label_pgm(
                    bundle.motion[static_cast<std::size_t>(t)],
                    out_dir + "/motion_flat/" + stem + ".pgm");
                pcproj::save_front_view(
                    pcproj::project_front_view(bundle.clouds[static_cast<std::size_t>(t)],
                                               bundle.calib, spec.height, spec.width),
                    out_dir + "/fv_flat/" + stem + ".fvim");
            }
        if (verbosity() >= 1) std::cerr << "gen: wrote " << scene_name << "\n";
    }
    synthgen::write_manifest(entries, out_dir + "/manifest.txt");
}

void cmd_train(const RunConfig& config) {
    config.restrict_keys(
        {"manifest", "out_dir", "loss_log", "burn_in_steps", "distill_steps", "batch_size",
         "seq_len", "learning_rate", "keep_rate", "drop_ratio", "enable_completion",
         "conf_threshold", "min_area", "motion_weight", "recon_weight", "completion_weight",
         "background_weight", "distill_weight", "num_slots", "feat_dim", "enc_c1", "enc_c2",
         "height", "width", "seed", "resume", "max_steps_this_run", "p_night_2d", "p_flip",
         "p_crop", "p_jitter", "p_drop"});
    const std::string manifest = config.str_required("manifest");
    const std::string out_dir = config.str_required("out_dir");
    if (!fs::is_regular_file(manifest)) throw DataError("manifest not found: " + manifest);

    distill::TrainConfig tc;
    tc.model2d = model_config(config, 3);
    tc.model3d = model_config(config, 4);
    tc.burn_in_steps = static_cast<int>(config.integer("burn_in_steps", 2000));
    tc.distill_steps = static_cast<int>(config.integer("distill_steps", 2000));
    tc.batch_size = static_cast<int>(config.integer("batch_size", 1));
    tc.seq_len = static_cast<int>(config.integer("seq_len", 5));
    tc.learning_rate = config.real("learning_rate", 4e-4);
    tc.keep_rate = config.real("keep_rate", 0.996);
    tc.drop_ratio = config.real("drop_ratio", 0.2);
    tc.enable_completion = config.boolean("enable_completion", true);
    tc.conf_threshold = config.real("conf_threshold", 0.7);
    tc.min_area = static_cast<int>(config.integer("min_area", 16));
    tc.motion_weight = config.real("motion_weight", 1.0);
    tc.recon_weight = config.real("recon_weight", 1.0);
    tc.completion_weight = config.real("completion_weight", 1.0);
    tc.background_weight = config.real("background_weight", 1.0);
    tc.distill_weight = config.real("distill_weight", 1.0);
    tc.seed = static_cast<std::uint64_t>(config.integer("seed", 0));
    const double p_flip = config.real("p_flip", 0.4);
    const double p_crop = config.real("p_crop", 0.4);
    const double p_jitter = config.real("p_jitter", 0.4);
    tc.augment2d.p_flip = p_flip;
    tc.augment2d.p_crop = p_crop;
    tc.augment2d.p_jitter = p_jitter;
    tc.augment2d.p_drop = 0.0;
    tc.augment2d.p_night = config.real("p_night_2d", 0.0);
    tc.augment3d.p_flip = p_flip;
    tc.augment3d.p_crop = p_crop;
    tc.augment3d.p_jitter = p_jitter;
    tc.augment3d.p_drop = config.real("p_drop", 0.4);
    if (tc.burn_in_steps < 0 || tc.distill_steps < 0 || tc.batch_size < 1 || tc.seq_len < 1)
        throw UsageError("invalid step/batch configuration");

    distill::Dataset data;
    try {
        data = distill::Dataset::load(manifest, tc.model2d.height, tc.model2d.width);
    } catch (const std::exception& e) {
        throw DataError(std::string("dataset load failed: ") + e.what());
    }

    distill::Trainer trainer(tc, std::move(data));
    const bool resume = config.boolean("resume", false);
    if (resume) {
        try {
            trainer.restore(out_dir);
        } catch (const std::exception& e) {
            throw DataError(std::string("resume failed: ") + e.what());
        }
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output dir: " + out_dir);
    const std::string loss_log = config.str("loss_log", out_dir + "/loss_log.csv");
    if (!resume && fs::exists(loss_log)) fs::remove(loss_log);

    const long long max_steps = config.integer("max_steps_this_run", 0);
    long long ran = 0;
    while (!trainer.done() && (max_steps == 0 || ran < max_steps)) {
        distill::LossReport report;
        try {
            report = trainer.step_once();
        } catch (const std::exception& e) {
            throw NumericError(e.what());
        }
        distill::append_loss_log(report, loss_log);
        if (verbosity() >= 1) {
            std::cerr << "step " << report.step << " ("
                      << (report.phase == distill::Phase::burn_in ? "burn_in" : "distill")
                      << ")";
            for (const auto& [label, v] : report.terms)
                if (label == "2d_total" || label == "3d_total")
                    std::cerr << " " << label << "=" << v;
            std::cerr << "\n";
        }
        ++ran;
    }
    trainer.save(out_dir);
}

void cmd_infer(const RunConfig& config) {
    config.restrict_keys({"checkpoint_dir", "manifest", "modality", "out_2d", "out_3d",
                          "min_area", "conf_threshold", "use_teacher", "num_slots", "feat_dim",
                          "enc_c1", "enc_c2", "height", "width"});
    const std::string checkpoint_dir = config.str_required("checkpoint_dir");
    const std::string manifest = config.str_required("manifest");
    const std::string modality = config.str("modality", "both");
    if (modality != "2d" && modality != "3d" && modality != "both")
        throw UsageError("modality must be 2d, 3d or both");
    const bool want2d = modality != "3d";
    const bool want3d = modality != "2d";
    const int min_area = static_cast<int>(config.integer("min_area", 16));
    const double conf_threshold = config.real("conf_threshold", 0.7);
    const bool use_teacher = config.boolean("use_teacher", false);
    const std::string role = use_teacher ? "teacher" : "student";
    if (!fs::is_regular_file(manifest)) throw DataError("manifest not found: " + manifest);

    try {
        const pcproj::ChannelStats stats = load_stats(checkpoint_dir);
        const slotcore::ModelConfig mc2d = model_config(config, 3);
        const slotcore::ModelConfig mc3d = model_config(config, 4);
        const distill::Dataset data =
            distill::Dataset::load(manifest, mc2d.height, mc2d.width, stats);

        slotcore::ModelParams params2d, params3d;
        std::string out_2d, out_3d;
        if (want2d) {
            params2d = slotcore::load_checkpoint(mc2d, checkpoint_dir + "/" + role + "_2d.modc");
            out_2d = config.str_required("out_2d");
            fs::create_directories(out_2d);
        }
        if (want3d) {
            params3d = slotcore::load_checkpoint(mc3d, checkpoint_dir + "/" + role + "_3d.modc");
            out_3d = config.str_required("out_3d");
            fs::create_directories(out_3d);
        }

        for (std::size_t s = 0; s < data.scenes.size(); ++s) {
            const auto& scene = data.scenes[s];
            std::vector<Tensor> rgb, fv;
            for (const auto& fd : scene.frames) {
                rgb.push_back(fd.rgb);
                fv.push_back(fd.fv_norm.channels);
            }
            auto write_preds = [&](const std::vector<evalfuse::Prediction>& preds,
                                   const std::string& dir) {
                for (std::size_t t = 0; t < preds.size(); ++t)
                    pseudolabel::save_label_pgm(
                        pseudolabel::labels_from_masks(preds[t].masks, mc2d.height, mc2d.width),
                        dir + "/" + frame_name(static_cast<int>(s), static_cast<int>(t)) +
                            ".pgm");
            };
            if (want2d)
                write_preds(evalfuse::predict_video(params2d, rgb, evalfuse::PredModality::m2d,
                                                    min_area, conf_threshold),
                            out_2d);
            if (want3d)
                write_preds(evalfuse::predict_video(params3d, fv, evalfuse::PredModality::m3d,
                                                    min_area, conf_threshold),
                            out_3d);
            if (verbosity() >= 1) std::cerr << "infer: scene " << s << " done\n";
        }
    } catch (const UsageError&) {
        throw;
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
}

void cmd_fuse(const RunConfig& config) {
    config.restrict_keys({"pred2d_dir", "pred3d_dir", "out_dir", "tau"});
    const std::string dir2d = config.str_required("pred2d_dir");
    const std::string dir3d = config.str_required("pred3d_dir");
    const std::string out_dir = config.str_required("out_dir");
    const double tau = config.real("tau", 0.3);
    if (tau <= 0.0 || tau > 1.0) throw UsageError("tau must be in (0,1]");
    fs::create_directories(out_dir);

    for (const std::string& name : sorted_pgms(dir2d)) {
        const std::string other = dir3d + "/" + name;
        if (!fs::is_regular_file(other)) throw DataError("missing 3d prediction: " + other);
        const pseudolabel::LabelGrid g2d = pseudolabel::load_label_pgm(dir2d + "/" + name);
        const pseudolabel::LabelGrid g3d = pseudolabel::load_label_pgm(other);
        evalfuse::Prediction p2d, p3d;
        p2d.modality = evalfuse::PredModality::m2d;
        p3d.modality = evalfuse::PredModality::m3d;
        p2d.masks = pseudolabel::masks_from_labels(g2d);
        p3d.masks = pseudolabel::masks_from_labels(g3d);
        const evalfuse::Prediction fused = evalfuse::late_fuse(p2d, p3d, tau);
        pseudolabel::save_label_pgm(
            pseudolabel::labels_from_masks(fused.masks, g2d.h, g2d.w), out_dir + "/" + name);
    }
}

void cmd_eval(const RunConfig& config) {
    config.restrict_keys({"pred_dir", "gt_dir", "fv_dir", "iou", "out_csv", "bands"});
    const std::string pred_dir = config.str_required("pred_dir");
    const std::string gt_dir = config.str_required("gt_dir");
    const std::string fv_dir = config.str("fv_dir", "");
    const double iou_threshold = config.real("iou", 0.5);

    std::vector<evalfuse::Band> bands;
    {
        std::string spec = config.str("bands", "0:10,10:30,30:70");
        std::replace(spec.begin(), spec.end(), ',', ' ');
        std::replace(spec.begin(), spec.end(), ':', ' ');
        std::istringstream in(spec);
        double lo, hi;
        while (in >> lo >> hi) bands.push_back({lo, hi});
        if (bands.empty()) throw UsageError("bands must be lo:hi[,lo:hi...]");
    }

    evalfuse::EvalAccumulator acc;
    struct BandAgg {
        int objects = 0;
        double points = 0.0;
        double f1 = 0.0, precision = 0.0, recall = 0.0;
        int frames = 0;
    };
    std::vector<BandAgg> agg(bands.size());

    const auto names = sorted_pgms(pred_dir);
    if (names.empty()) throw DataError("no predictions in " + pred_dir);
    for (const std::string& name : names) {
        const std::string gt_path = gt_dir + "/" + name;
        if (!fs::is_regular_file(gt_path)) throw DataError("missing GT: " + gt_path);
        const pseudolabel::LabelGrid pred_labels =
            pseudolabel::load_label_pgm(pred_dir + "/" + name);
        const pseudolabel::LabelGrid gt_labels = pseudolabel::load_label_pgm(gt_path);
        evalfuse::Prediction pred;
        pred.masks = pseudolabel::masks_from_labels(pred_labels);
        acc.add_frame(pred, gt_labels, iou_threshold);

        if (!fv_dir.empty()) {
            const std::string stem = name.substr(0, name.size() - 4);
            const std::string fv_path = fv_dir + "/" + stem + ".fvim";
            if (!fs::is_regular_file(fv_path))
                throw DataError("missing front view: " + fv_path);
            const pcproj::FrontViewImage fv = pcproj::load_front_view(fv_path);
            const auto rows = evalfuse::banded_eval(
                pred, pseudolabel::masks_from_labels(gt_labels), fv, bands, iou_threshold);
            for (std::size_t b = 0; b < rows.size(); ++b) {
                if (rows[b].num_objects == 0) continue;
                agg[b].objects += rows[b].num_objects;
                agg[b].points += rows[b].avg_points_per_object * rows[b].num_objects;
                agg[b].f1 += rows[b].f1;
                agg[b].precision += rows[b].precision;
                agg[b].recall += rows[b].recall;
                ++agg[b].frames;
            }
        }
    }

    evalfuse::MetricsReport report = acc.report();
    if (!fv_dir.empty())
        for (std::size_t b = 0; b < bands.size(); ++b) {
            evalfuse::BandRow row;
            row.lo = bands[b].lo;
            row.hi = bands[b].hi;
            row.num_objects = agg[b].objects;
            if (agg[b].objects > 0)
                row.avg_points_per_object = agg[b].points / agg[b].objects;
            if (agg[b].frames > 0) {
                row.f1 = agg[b].f1 / agg[b].frames;
                row.precision = agg[b].precision / agg[b].frames;
                row.recall = agg[b].recall / agg[b].frames;
            }
            report.bands.push_back(row);
        }

    const std::string out_csv = config.str("out_csv", "");
    if (out_csv.empty()) {
        evalfuse::write_report_csv(report, std::cout);
    } else {
        std::ofstream f(out_csv);
        if (!f) throw DataError("cannot write " + out_csv);
        evalfuse::write_report_csv(report, f);
        evalfuse::print_report(report, std::cout);
    }
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"multi-object discovery from RGB and point cloud front views"};
    app.require_subcommand(1);

    struct SubArgs {
        std::string config_path;
        std::vector<std::string> overrides;
    };
    std::map<std::string, SubArgs> args;
    std::map<std::string, void (*)(const RunConfig&)> handlers = {
        {"gen", cmd_gen},   {"train", cmd_train}, {"infer", cmd_infer},
        {"fuse", cmd_fuse}, {"eval", cmd_eval}};
    for (auto& [name, fn] : handlers) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", args[name].config_path, "key = value config file");
        sub->add_option("--set", args[name].overrides, "override as key=value (repeatable)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    }

    const std::string sub = app.get_subcommands().front()->get_name();
    try {
        RunConfig cfg;
        if (!args[sub].config_path.empty()) cfg = RunConfig::from_file(args[sub].config_path);
        for (const std::string& kv : args[sub].overrides) cfg.apply_override(kv);
        handlers[sub](cfg);
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace modisc::cli
