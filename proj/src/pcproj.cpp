#include "modisc/pcproj.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace modisc::pcproj {

Calibration Calibration::identity(double fx, double fy, double cx, double cy) {
    Calibration c;
    c.projection = {fx, 0, cx, 0, 0, fy, cy, 0, 0, 0, 1, 0};
    c.rectification = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    c.lidar_to_camera = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
    return c;
}

bool Calibration::finite() const {
    for (double v : projection)
        if (!std::isfinite(v)) return false;
    for (double v : rectification)
        if (!std::isfinite(v)) return false;
    for (double v : lidar_to_camera)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {

struct Vec3 {
    double x, y, z;
};

Vec3 apply34(const std::array<double, 12>& m, double x, double y, double z) {
    return {m[0] * x + m[1] * y + m[2] * z + m[3],
            m[4] * x + m[5] * y + m[6] * z + m[7],
            m[8] * x + m[9] * y + m[10] * z + m[11]};
}

Vec3 apply33(const std::array<double, 9>& m, const Vec3& v) {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

}  // namespace

FrontViewImage project_front_view(const PointCloud& pc, const Calibration& calib,
                                  int height, int width, double fill) {
    if (height <= 0 || width <= 0)
        throw std::invalid_argument("project_front_view: image dims must be positive");
    if (!calib.finite())
        throw std::invalid_argument("project_front_view: non-finite calibration");

    FrontViewImage fv;
    fv.height = height;
    fv.width = width;
    fv.fill = fill;
    fv.channels = Tensor::full({4, height, width}, fill);

    // Per-pixel best (distance, input index) for deterministic collisions.
    std::vector<double> best_d(static_cast<std::size_t>(height) * width,
                               std::numeric_limits<double>::infinity());
    std::vector<std::int64_t> best_idx(static_cast<std::size_t>(height) * width, -1);

    for (std::size_t idx = 0; idx < pc.points.size(); ++idx) {
        const Point& p = pc.points[idx];
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) continue;
        const Vec3 cam = apply33(calib.rectification,
                                 apply34(calib.lidar_to_camera, p.x, p.y, p.z));
        if (cam.z <= 0.0) continue;
        const std::array<double, 12>& P = calib.projection;
        const double u = P[0] * cam.x + P[1] * cam.y + P[2] * cam.z + P[3];
        const double v = P[4] * cam.x + P[5] * cam.y + P[6] * cam.z + P[7];
        const double w = P[8] * cam.x + P[9] * cam.y + P[10] * cam.z + P[11];
        if (w <= 0.0) continue;
        const int col = static_cast<int>(std::lround(u / w));
        const int row = static_cast<int>(std::lround(v / w));
        if (row < 0 || row >= height || col < 0 || col >= width) continue;
        const double d = std::sqrt(cam.x * cam.x + cam.y * cam.y + cam.z * cam.z);
        const std::size_t pix = static_cast<std::size_t>(row) * width + col;
        if (d < best_d[pix] ||
            (d == best_d[pix] && static_cast<std::int64_t>(idx) < best_idx[pix])) {
            best_d[pix] = d;
            best_idx[pix] = static_cast<std::int64_t>(idx);
            fv.channels.at(0, row, col) = cam.x;
            fv.channels.at(1, row, col) = cam.y;
            fv.channels.at(2, row, col) = cam.z;
            fv.channels.at(3, row, col) = d;
        }
    }
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j)
            if (best_idx[static_cast<std::size_t>(i) * width + j] >= 0)
                fv.valid_set.insert({i, j});
    return fv;
}

std::pair<FrontViewImage, DropRecord> drop_points(const FrontViewImage& fv,
                                                  double drop_ratio,
                                                  std::uint64_t seed) {
    if (drop_ratio < 0.0 || drop_ratio > 1.0)
        throw std::invalid_argument("drop_points: drop_ratio outside [0,1]");
    DropRecord rec;
    rec.drop_ratio = drop_ratio;
    rec.rng_seed = seed;

    std::vector<PixelCoord> valid(fv.valid_set.begin(), fv.valid_set.end());
    const auto n_drop = static_cast<std::size_t>(
        std::lround(drop_ratio * static_cast<double>(valid.size())));
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates: first n_drop entries are the dropped set.
    for (std::size_t i = 0; i < n_drop && i + 1 < valid.size(); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, valid.size() - 1);
        std::swap(valid[i], valid[pick(rng)]);
    }
    FrontViewImage out = fv;
    for (std::size_t i = 0; i < n_drop && i < valid.size(); ++i) {
        const auto [r, c] = valid[i];
        rec.dropped.insert(valid[i]);
        out.valid_set.erase(valid[i]);
        for (int ch = 0; ch < 4; ++ch) out.channels.at(ch, r, c) = fv.fill;
    }
    return {std::move(out), std::move(rec)};
}

FrontViewImage normalize_front_view(const FrontViewImage& fv, const ChannelStats& stats) {
    for (int c = 0; c < 4; ++c)
        if (!(stats.max[static_cast<std::size_t>(c)] > stats.min[static_cast<std::size_t>(c)]))
            throw std::invalid_argument("normalize_front_view: degenerate stats on channel " +
                                        std::to_string(c));
    FrontViewImage out = fv;
    for (const auto& [i, j] : fv.valid_set)
        for (int c = 0; c < 4; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const double span = stats.max[ci] - stats.min[ci];
            out.channels.at(c, i, j) =
                (fv.channels.at(c, i, j) - stats.min[ci]) / span;
        }
    return out;
}

void accumulate_stats(const FrontViewImage& fv, ChannelStats& stats, bool& first) {
    for (const auto& [i, j] : fv.valid_set)
        for (int c = 0; c < 4; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const double v = fv.channels.at(c, i, j);
            if (first) {
                stats.min[ci] = v;
                stats.max[ci] = v;
            } else {
                stats.min[ci] = std::min(stats.min[ci], v);
                stats.max[ci] = std::max(stats.max[ci], v);
            }
        }
    if (!fv.valid_set.empty()) first = false;
}

// --- file formats ---

namespace {

void write_f32(std::ostream& os, float v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
float read_f32(std::istream& is) {
    float v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

PointCloud load_point_cloud(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open point cloud: " + path);
    PointCloud pc;
    float rec[4];
    while (f.read(reinterpret_cast<char*>(rec), sizeof(rec)))
        pc.points.push_back({rec[0], rec[1], rec[2], rec[3]});
    return pc;
}

void save_point_cloud(const PointCloud& pc, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write point cloud: " + path);
    for (const Point& p : pc.points) {
        const float rec[4] = {static_cast<float>(p.x), static_cast<float>(p.y),
                              static_cast<float>(p.z), static_cast<float>(p.reflectance)};
        f.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
}

Calibration load_calibration(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open calibration: " + path);
    Calibration c;
    bool got_p = false, got_r = false, got_t = false;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::string key;
        if (!(ss >> key)) continue;
        if (!key.empty() && key.back() == ':') key.pop_back();
        auto read_vals = [&ss](double* dst, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i)
                if (!(ss >> dst[i])) throw std::runtime_error("calibration: short value list");
        };
        if (key == "P2") {
            read_vals(c.projection.data(), 12);
            got_p = true;
        } else if (key == "R0_rect") {
            read_vals(c.rectification.data(), 9);
            got_r = true;
        } else if (key == "Tr_velo_to_cam") {
            read_vals(c.lidar_to_camera.data(), 12);
            got_t = true;
        }
    }
    if (!got_p || !got_r || !got_t)
        throw std::runtime_error("calibration: missing P2/R0_rect/Tr_velo_to_cam in " + path);
    return c;
}

void save_calibration(const Calibration& calib, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write calibration: " + path);
    f.precision(17);
    f << "P2:";
    for (double v : calib.projection) f << " " << v;
    f << "\nR0_rect:";
    for (double v : calib.rectification) f << " " << v;
    f << "\nTr_velo_to_cam:";
    for (double v : calib.lidar_to_camera) f << " " << v;
    f << "\n";
}

FrontViewImage load_front_view(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open front view: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "FVIM", 4) != 0)
        throw std::runtime_error("bad front-view magic in " + path);
    FrontViewImage fv;
    fv.height = static_cast<int>(read_u32(f));
    fv.width = static_cast<int>(read_u32(f));
    fv.fill = read_f32(f);
    if (!f || fv.height <= 0 || fv.width <= 0)
        throw std::runtime_error("bad front-view header in " + path);
    fv.channels = Tensor({4, fv.height, fv.width});
    for (int i = 0; i < fv.height; ++i)
        for (int j = 0; j < fv.width; ++j)
            for (int c = 0; c < 4; ++c) fv.channels.at(c, i, j) = read_f32(f);
    if (!f) throw std::runtime_error("truncated front view: " + path);
    for (int i = 0; i < fv.height; ++i)
        for (int j = 0; j < fv.width; ++j) {
            bool all_fill = true;
            for (int c = 0; c < 4; ++c)
                if (fv.channels.at(c, i, j) != fv.fill) all_fill = false;
            if (!all_fill) fv.valid_set.insert({i, j});
        }
    return fv;
}

void save_front_view(const FrontViewImage& fv, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write front view: " + path);
    f.write("FVIM", 4);
    write_u32(f, static_cast<std::uint32_t>(fv.height));
    write_u32(f, static_cast<std::uint32_t>(fv.width));
    write_f32(f, static_cast<float>(fv.fill));
    for (int i = 0; i < fv.height; ++i)
        for (int j = 0; j < fv.width; ++j)
            for (int c = 0; c < 4; ++c)
                write_f32(f, static_cast<float>(fv.channels.at(c, i, j)));
}

}  // namespace modisc::pcproj
