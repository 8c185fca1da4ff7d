#include "modisc/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace modisc::synthgen {

namespace {

struct ObjectSpec {
    bool ellipse = false;
    double cx = 0.0, cy = 0.0;    // center, pixels, frame 0
    double half_w = 0.0, half_h = 0.0;
    double depth = 0.0;           // camera-frame z, meters
    double vx = 0.0, vy = 0.0;    // pixels per frame
    double r = 0.5, g = 0.5, b = 0.5;
    double texture_freq = 0.3;
};

bool inside_object(const ObjectSpec& o, double cx, double cy, int i, int j) {
    const double dx = (j - cx) / o.half_w;
    const double dy = (i - cy) / o.half_h;
    if (o.ellipse) return dx * dx + dy * dy <= 1.0;
    return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
}

bool boxes_overlap(const ObjectSpec& a, const ObjectSpec& b, int frames) {
    // conservative: axis-aligned boxes swept over the whole trajectory
    auto sweep = [frames](const ObjectSpec& o, double& lo_x, double& hi_x, double& lo_y,
                          double& hi_y) {
        lo_x = std::min(o.cx, o.cx + o.vx * (frames - 1)) - o.half_w;
        hi_x = std::max(o.cx, o.cx + o.vx * (frames - 1)) + o.half_w;
        lo_y = std::min(o.cy, o.cy + o.vy * (frames - 1)) - o.half_h;
        hi_y = std::max(o.cy, o.cy + o.vy * (frames - 1)) + o.half_h;
    };
    double alx, ahx, aly, ahy, blx, bhx, bly, bhy;
    sweep(a, alx, ahx, aly, ahy);
    sweep(b, blx, bhx, bly, bhy);
    return alx < bhx && blx < ahx && aly < bhy && bly < ahy;
}

double background_depth(int row, int height) {
    // ground-plane-like ramp: far at the top, near at the bottom
    const double t = height > 1 ? static_cast<double>(row) / (height - 1) : 0.0;
    return 60.0 - 35.0 * t;
}

}  // namespace

SceneBundle generate(const SceneSpec& spec) {
    if (spec.n_objects < 1) throw std::invalid_argument("generate: n_objects must be >= 1");
    if (spec.n_moving < 0 || spec.n_moving > spec.n_objects)
        throw std::invalid_argument("generate: bad n_moving");
    if (spec.frames < 1) throw std::invalid_argument("generate: frames must be >= 1");
    if (spec.depth_min < 1.0 || spec.depth_max > 70.0 || spec.depth_min >= spec.depth_max)
        throw std::invalid_argument("generate: depths must lie in [1,70] m");

    std::mt19937_64 rng(spec.seed);
    const int h = spec.height, w = spec.width, T = spec.frames;

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<ObjectSpec> objects;
    for (int k = 0; k < spec.n_objects; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            ObjectSpec o;
            o.ellipse = unit(rng) < 0.5;
            o.half_w = spec.min_half_size +
                       unit(rng) * (spec.max_half_size - spec.min_half_size);
            o.half_h = spec.min_half_size +
                       unit(rng) * (spec.max_half_size - spec.min_half_size);
            o.depth = spec.depth_min + unit(rng) * (spec.depth_max - spec.depth_min);
            if (k < spec.n_moving) {
                o.vx = (unit(rng) < 0.5 ? -1.0 : 1.0) * (1.0 + 2.0 * unit(rng));
                o.vy = (unit(rng) - 0.5) * 1.5;
            }
            // keep the full trajectory inside the image
            const double span_x = std::abs(o.vx) * (T - 1);
            const double span_y = std::abs(o.vy) * (T - 1);
            const double margin_x = o.half_w + span_x + 1.0;
            const double margin_y = o.half_h + span_y + 1.0;
            if (2.0 * margin_x >= w || 2.0 * margin_y >= h) continue;
            o.cx = margin_x + unit(rng) * (w - 2.0 * margin_x);
            o.cy = margin_y + unit(rng) * (h - 2.0 * margin_y);
            if (o.vx < 0.0) o.cx = w - margin_x - (o.cx - margin_x);
            // saturated colors so objects never blend into the gray
            // background ramp
            do {
                o.r = 0.25 + 0.75 * unit(rng);
                o.g = 0.25 + 0.75 * unit(rng);
                o.b = 0.25 + 0.75 * unit(rng);
            } while (std::max({o.r, o.g, o.b}) - std::min({o.r, o.g, o.b}) < 0.3);
            o.texture_freq = 0.2 + 0.5 * unit(rng);
            bool clash = false;
            for (const ObjectSpec& prev : objects)
                if (boxes_overlap(o, prev, T)) clash = true;
            if (clash) continue;
            objects.push_back(o);
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("generate: could not place object " + std::to_string(k) +
                                     " without overlap");
    }

    SceneBundle bundle;
    bundle.spec = spec;
    bundle.calib = pcproj::Calibration::identity(spec.focal_x, spec.focal_y, w / 2.0, h / 2.0);

    // Far-to-near paint order so nearer objects occlude.
    std::vector<int> order(objects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&objects](int a, int b) { return objects[a].depth > objects[b].depth; });

    for (int t = 0; t < T; ++t) {
        Tensor rgb({3, h, w});
        std::vector<double> depth(static_cast<std::size_t>(h) * w);
        pseudolabel::LabelGrid gt;
        gt.h = h;
        gt.w = w;
        gt.labels.assign(static_cast<std::size_t>(h) * w, 0);

        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double grad = 0.25 + 0.4 * static_cast<double>(i) / h;
                const double tex = 0.05 * std::sin(0.4 * j) * std::cos(0.3 * i);
                rgb.at(0, i, j) = grad + tex;
                rgb.at(1, i, j) = grad * 0.9 + tex;
                rgb.at(2, i, j) = grad * 1.1 + tex;
                depth[static_cast<std::size_t>(i) * w + j] = background_depth(i, h);
            }

        for (int k : order) {
            const ObjectSpec& o = objects[static_cast<std::size_t>(k)];
            const double cx = o.cx + o.vx * t;
            const double cy = o.cy + o.vy * t;
            const int lo_i = std::max(0, static_cast<int>(std::floor(cy - o.half_h)));
            const int hi_i = std::min(h - 1, static_cast<int>(std::ceil(cy + o.half_h)));
            const int lo_j = std::max(0, static_cast<int>(std::floor(cx - o.half_w)));
            const int hi_j = std::min(w - 1, static_cast<int>(std::ceil(cx + o.half_w)));
            for (int i = lo_i; i <= hi_i; ++i)
                for (int j = lo_j; j <= hi_j; ++j) {
                    if (!inside_object(o, cx, cy, i, j)) continue;
                    const std::size_t pix = static_cast<std::size_t>(i) * w + j;
                    const double tex =
                        0.12 * std::sin(o.texture_freq * (j - cx)) *
                        std::sin(o.texture_freq * (i - cy));
                    rgb.at(0, i, j) = std::clamp(o.r + tex, 0.0, 1.0);
                    rgb.at(1, i, j) = std::clamp(o.g + tex, 0.0, 1.0);
                    rgb.at(2, i, j) = std::clamp(o.b + tex, 0.0, 1.0);
                    depth[pix] = o.depth;
                    gt.labels[pix] = static_cast<std::uint16_t>(k + 1);
                }
        }
        for (auto& v : rgb.vec()) v = std::clamp(v, 0.0, 1.0);

        pseudolabel::LabelGrid motion;
        motion.h = h;
        motion.w = w;
        motion.labels.assign(static_cast<std::size_t>(h) * w, 0);
        for (std::size_t pix = 0; pix < gt.labels.size(); ++pix) {
            const int k = static_cast<int>(gt.labels[pix]) - 1;
            if (k >= 0 && k < spec.n_moving)
                motion.labels[pix] = static_cast<std::uint16_t>(k + 1);
        }

        pcproj::PointCloud cloud;
        cloud.frame_id = t;
        std::vector<int> obj_of_point;
        const double cx0 = w / 2.0, cy0 = h / 2.0;
        for (int i = 0; i < h; i += spec.row_subsample)
            for (int j = 0; j < w; ++j) {
                const std::size_t pix = static_cast<std::size_t>(i) * w + j;
                const double z = depth[pix];
                const double x = (j - cx0) * z / spec.focal_x;
                const double y = (i - cy0) * z / spec.focal_y;
                const int k = static_cast<int>(gt.labels[pix]) - 1;
                const double refl =
                    (k >= 0 && k == spec.low_reflectivity_object) ? 0.05 : 0.8;
                cloud.points.push_back({x, y, z, refl});
                obj_of_point.push_back(k);
            }

        bundle.frames.push_back(std::move(rgb));
        bundle.clouds.push_back(std::move(cloud));
        bundle.point_object.push_back(std::move(obj_of_point));
        bundle.gt.push_back(std::move(gt));
        bundle.motion.push_back(std::move(motion));
    }
    return bundle;
}

SceneBundle degrade(const SceneBundle& bundle, DegradeMode mode, double strength) {
    if (strength < 0.0 || strength > 1.0)
        throw std::invalid_argument("degrade: strength outside [0,1]");
    SceneBundle out = bundle;
    if (mode == DegradeMode::night) {
        for (Tensor& frame : out.frames)
            for (auto& v : frame.vec()) v *= (1.0 - strength);
        return out;
    }
    // low_reflectivity: drop points of the flagged object
    const int target = bundle.spec.low_reflectivity_object;
    if (target < 0) return out;
    std::mt19937_64 rng(bundle.spec.seed ^ 0x9e3779b97f4a7c15ull);
    for (std::size_t t = 0; t < out.clouds.size(); ++t) {
        std::vector<std::size_t> hits;
        for (std::size_t p = 0; p < out.point_object[t].size(); ++p)
            if (out.point_object[t][p] == target) hits.push_back(p);
        const auto n_drop = static_cast<std::size_t>(
            std::ceil(strength * static_cast<double>(hits.size())));
        for (std::size_t i = 0; i < n_drop && i + 1 < hits.size(); ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, hits.size() - 1);
            std::swap(hits[i], hits[pick(rng)]);
        }
        std::vector<char> drop(out.point_object[t].size(), 0);
        for (std::size_t i = 0; i < n_drop && i < hits.size(); ++i) drop[hits[i]] = 1;
        pcproj::PointCloud kept;
        kept.frame_id = out.clouds[t].frame_id;
        std::vector<int> kept_obj;
        for (std::size_t p = 0; p < drop.size(); ++p)
            if (!drop[p]) {
                kept.points.push_back(out.clouds[t].points[p]);
                kept_obj.push_back(out.point_object[t][p]);
            }
        out.clouds[t] = std::move(kept);
        out.point_object[t] = std::move(kept_obj);
    }
    return out;
}

void save_ppm(const Tensor& rgb, const std::string& path) {
    if (rgb.ndim() != 3 || rgb.dim(0) != 3)
        throw std::invalid_argument("save_ppm: expected [3,H,W]");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write PPM: " + path);
    const int h = rgb.dim(1), w = rgb.dim(2);
    f << "P6\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(rgb.at(c, i, j), 0.0, 1.0);
                f.put(static_cast<char>(std::lround(v * 255.0)));
            }
}

Tensor load_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open PPM: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("not a P6 PPM: " + path);
    int w, h, maxval;
    f >> w >> h >> maxval;
    if (maxval != 255) throw std::runtime_error("expected 8-bit PPM: " + path);
    f.get();
    Tensor rgb({3, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) {
                const int v = f.get();
                if (v < 0) throw std::runtime_error("truncated PPM: " + path);
                rgb.at(c, i, j) = v / 255.0;
            }
    return rgb;
}

namespace {

std::string frame_name(const char* prefix, int t, const char* ext) {
    std::ostringstream ss;
    ss << prefix << "_" << (t < 10 ? "0" : "") << t << ext;
    return ss.str();
}

}  // namespace

void write_scene(const SceneBundle& bundle, const std::string& dir) {
    std::filesystem::create_directories(dir);
    pcproj::save_calibration(bundle.calib, dir + "/calib.txt");
    for (std::size_t t = 0; t < bundle.frames.size(); ++t) {
        const int ti = static_cast<int>(t);
        save_ppm(bundle.frames[t], dir + "/" + frame_name("frame", ti, ".ppm"));
        pcproj::save_point_cloud(bundle.clouds[t], dir + "/" + frame_name("cloud", ti, ".bin"));
        pseudolabel::save_label_pgm(bundle.gt[t], dir + "/" + frame_name("gt", ti, ".pgm"));
        pseudolabel::save_label_pgm(bundle.motion[t],
                                    dir + "/" + frame_name("motion", ti, ".pgm"));
    }
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path);
    for (const ManifestEntry& e : entries) f << e.scene_dir << " " << e.frames << "\n";
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        if (!(ss >> e.scene_dir >> e.frames))
            throw std::runtime_error("bad manifest line: " + line);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace modisc::synthgen
