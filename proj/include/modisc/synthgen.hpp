#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modisc/pcproj.hpp"
#include "modisc/pseudolabel.hpp"
#include "modisc/tensor.hpp"

namespace modisc::synthgen {

// Toy multi-object driving-like scenes: textured rectangles/ellipses
// over a gradient background, with dense depth turned into LiDAR-like
// point clouds by row subsampling.
struct SceneSpec {
    std::uint64_t seed = 0;
    int n_objects = 3;
    int n_moving = 2;  // first n_moving objects translate, rest are static
    int frames = 5;    // T
    int height = 64;
    int width = 128;
    double focal_x = 100.0, focal_y = 100.0;  // principal point at image center
    int row_subsample = 2;   // keep every k-th image row in the point cloud
    double depth_min = 5.0;  // meters
    double depth_max = 40.0;
    int low_reflectivity_object = -1;  // object index flagged for degrade()
    int min_half_size = 6, max_half_size = 13;  // object half extents, pixels
};

struct SceneBundle {
    SceneSpec spec;
    pcproj::Calibration calib;
    std::vector<Tensor> frames;                  // [3,H,W] RGB in [0,1]
    std::vector<pcproj::PointCloud> clouds;      // one per frame
    std::vector<std::vector<int>> point_object;  // per frame: object index per point, -1 = bg
    std::vector<pseudolabel::LabelGrid> gt;      // all objects
    std::vector<pseudolabel::LabelGrid> motion;  // moving objects only
};

// Deterministic per seed. Throws after a bounded number of failed
// non-overlapping placement attempts.
SceneBundle generate(const SceneSpec& spec);

enum class DegradeMode { night, low_reflectivity };

// night: scales RGB toward black, point clouds untouched.
// low_reflectivity: removes ceil(strength * n) points of the flagged
// object per frame, RGB untouched.
SceneBundle degrade(const SceneBundle& bundle, DegradeMode mode, double strength);

// --- dataset on disk ---

// Binary PPM (P6, 8-bit) RGB frames.
void save_ppm(const Tensor& rgb, const std::string& path);
Tensor load_ppm(const std::string& path);

// Writes frame_XX.ppm, cloud_XX.bin, gt_XX.pgm, motion_XX.pgm and
// calib.txt under dir.
void write_scene(const SceneBundle& bundle, const std::string& dir);

struct ManifestEntry {
    std::string scene_dir;
    int frames = 0;
};

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> load_manifest(const std::string& path);

}  // namespace modisc::synthgen
