#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "modisc/tensor.hpp"

namespace modisc::pcproj {

struct Point {
    double x = 0.0, y = 0.0, z = 0.0;
    double reflectance = 0.0;
};

struct PointCloud {
    std::vector<Point> points;
    int frame_id = 0;
};

// KITTI-style chained projection: pixel = P * R0 * Tr * [x y z 1]^T.
struct Calibration {
    std::array<double, 12> projection;       // P, 3x4 row-major
    std::array<double, 9> rectification;     // R0, 3x3 row-major
    std::array<double, 12> lidar_to_camera;  // Tr, 3x4 row-major

    static Calibration identity(double fx, double fy, double cx, double cy);
    bool finite() const;
};

using PixelCoord = std::pair<int, int>;  // (row i, col j)

// Dense H'xW'x4 grid of (X,Y,Z,d) with fill-value semantics. A pixel is
// valid iff it is in valid_set; invalid pixels hold (f,f,f,f).
struct FrontViewImage {
    int height = 0;
    int width = 0;
    double fill = 0.0;
    Tensor channels;  // shape [4, H', W']
    std::set<PixelCoord> valid_set;

    bool valid(int i, int j) const { return valid_set.count({i, j}) > 0; }
    double depth(int i, int j) const { return channels.at(3, i, j); }
};

struct DropRecord {
    std::set<PixelCoord> dropped;
    double drop_ratio = 0.0;
    std::uint64_t rng_seed = 0;
};

// Projects every point with positive camera-frame depth into the grid.
// d is the Euclidean distance to the camera origin; on collision the
// nearer point wins, ties broken by lowest input index.
FrontViewImage project_front_view(const PointCloud& pc, const Calibration& calib,
                                  int height, int width, double fill = 0.0);

// Resets round(drop_ratio * |P|) uniformly chosen valid pixels to the
// fill vector. Deterministic per seed.
std::pair<FrontViewImage, DropRecord> drop_points(const FrontViewImage& fv,
                                                  double drop_ratio,
                                                  std::uint64_t seed);

struct ChannelStats {
    std::array<double, 4> min{};
    std::array<double, 4> max{};
};

// Min-max maps valid pixels to [0,1] per channel; fill pixels keep f.
FrontViewImage normalize_front_view(const FrontViewImage& fv, const ChannelStats& stats);

// Accumulate dataset-wide per-channel min/max over valid pixels.
void accumulate_stats(const FrontViewImage& fv, ChannelStats& stats, bool& first);

// --- file formats ---

// KITTI raw layout: little-endian f32 records (x,y,z,reflectance).
PointCloud load_point_cloud(const std::string& path);
void save_point_cloud(const PointCloud& pc, const std::string& path);

// Plain text `KEY: v1 v2 ...` with keys P2, R0_rect, Tr_velo_to_cam.
Calibration load_calibration(const std::string& path);
void save_calibration(const Calibration& calib, const std::string& path);

// 16-byte header (magic "FVIM", u32 H', u32 W', f32 fill) followed by
// H'*W'*4 little-endian f32, row-major with 4 channels per pixel.
FrontViewImage load_front_view(const std::string& path);
void save_front_view(const FrontViewImage& fv, const std::string& path);

}  // namespace modisc::pcproj
