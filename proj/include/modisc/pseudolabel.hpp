#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modisc/attention.hpp"
#include "modisc/pcproj.hpp"

namespace modisc::pseudolabel {

struct Mask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> data;  // row-major, values in {0,1}

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, 0) {}
    std::uint8_t& at(int i, int j) { return data[static_cast<std::size_t>(i) * w + j]; }
    std::uint8_t at(int i, int j) const { return data[static_cast<std::size_t>(i) * w + j]; }
    int area() const;
    bool empty() const { return area() == 0; }
};

struct MaskSet {
    std::vector<Mask> masks;
    std::vector<double> scores;  // empty or one per mask
    int frame_id = 0;
};

struct Candidate {
    Mask mask;
    double confidence = 0.0;
    int source_slot = -1;
};

// Keeps exactly the masks with at least one positive pixel over a valid
// front-view pixel; order preserved.
MaskSet filter_motion_masks(const MaskSet& m2d, const pcproj::FrontViewImage& fv);

// Minimum-cost one-to-one assignment, rows <= cols. Returns the column
// assigned to each row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost);

// Matches each mask to a distinct foreground slot minimizing total mean
// binary cross-entropy between mask and attention map.
std::vector<std::pair<int, int>> match(const MaskSet& masks, const AttentionMaps& maps);

// Per-pixel argmax over [slots | background]; background labeled 0,
// slot k labeled k+1; ties go to the lowest slot index.
std::vector<std::uint16_t> binarize_teacher(const AttentionMaps& maps);

// 4-connected components of each slot's binarized region, scored by
// mean foreground activation; filtered by area and confidence.
std::vector<Candidate> extract_candidates(const AttentionMaps& maps, int min_area,
                                          double conf_threshold);

// Mean of fg over the mask's positive pixels; throws on an empty mask.
double confidence_score(const Mask& mask, const Tensor& w_fg);

// 4-connected components of a binary grid; returns one mask per component.
std::vector<Mask> connected_components(const Mask& binary);

Mask resize_nearest(const Mask& m, int new_h, int new_w);

// --- label grids and PGM files ---

struct LabelGrid {
    int h = 0, w = 0;
    std::vector<std::uint16_t> labels;  // 0 = background, k > 0 = instance k

    std::uint16_t at(int i, int j) const { return labels[static_cast<std::size_t>(i) * w + j]; }
};

MaskSet masks_from_labels(const LabelGrid& grid);
LabelGrid labels_from_masks(const MaskSet& set, int h, int w);

// Binary PGM, P5 maxval 65535, big-endian samples per the PGM spec.
LabelGrid load_label_pgm(const std::string& path);
void save_label_pgm(const LabelGrid& grid, const std::string& path);

}  // namespace modisc::pseudolabel
