#include "modisc/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace modisc::pseudolabel {

int Mask::area() const {
    return static_cast<int>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

MaskSet filter_motion_masks(const MaskSet& m2d, const pcproj::FrontViewImage& fv) {
    MaskSet out;
    out.frame_id = m2d.frame_id;
    const bool has_scores = m2d.scores.size() == m2d.masks.size();
    for (std::size_t l = 0; l < m2d.masks.size(); ++l) {
        const Mask& m = m2d.masks[l];
        if (m.h != fv.height || m.w != fv.width)
            throw std::invalid_argument("filter_motion_masks: mask/front-view shape mismatch");
        bool keep = false;
        for (const auto& [i, j] : fv.valid_set)
            if (m.at(i, j)) {
                keep = true;
                break;
            }
        if (keep) {
            out.masks.push_back(m);
            if (has_scores) out.scores.push_back(m2d.scores[l]);
        }
    }
    return out;
}

// Jonker-Volgenant style shortest augmenting path assignment, O(n^2 m).
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    const int m = static_cast<int>(cost[0].size());
    if (n > m) throw std::invalid_argument("solve_assignment: more rows than columns");
    for (const auto& row : cost)
        if (static_cast<int>(row.size()) != m)
            throw std::invalid_argument("solve_assignment: ragged cost matrix");

    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);   // row matched to column
    std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, INF);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = INF;
            int j1 = -1;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost[static_cast<std::size_t>(i0) - 1][static_cast<std::size_t>(j) - 1] -
                                   u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j)
        if (p[static_cast<std::size_t>(j)] > 0)
            row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
    return row_to_col;
}

namespace {

constexpr double kProbEps = 1e-7;

double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

}  // namespace

std::vector<std::pair<int, int>> match(const MaskSet& masks, const AttentionMaps& maps) {
    const int L = static_cast<int>(masks.masks.size());
    const int K = maps.num_slots();
    if (L > K) throw std::invalid_argument("match: more masks than slots");
    if (L == 0) return {};
    const int n = maps.num_positions();
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(L),
                                          std::vector<double>(static_cast<std::size_t>(K), 0.0));
    for (int l = 0; l < L; ++l) {
        const Mask& m = masks.masks[static_cast<std::size_t>(l)];
        if (m.h * m.w != n) throw std::invalid_argument("match: mask/map resolution mismatch");
        for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                const double w = clamp_prob(maps.slots.at(i, k));
                acc -= m.data[static_cast<std::size_t>(i)] ? std::log(w) : std::log(1.0 - w);
            }
            cost[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)] = acc / n;
        }
    }
    const std::vector<int> assign = solve_assignment(cost);
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) pairs.emplace_back(l, assign[static_cast<std::size_t>(l)]);
    return pairs;
}

std::vector<std::uint16_t> binarize_teacher(const AttentionMaps& maps) {
    const int n = maps.num_positions();
    const int K = maps.num_slots();
    std::vector<std::uint16_t> labels(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        int best = -1;  // -1 = background
        double best_v = maps.background[i];
        for (int k = K - 1; k >= 0; --k) {
            // scan high to low so the lowest slot index wins ties
            if (maps.slots.at(i, k) >= best_v) {
                best_v = maps.slots.at(i, k);
                best = k;
            }
        }
        labels[static_cast<std::size_t>(i)] = best < 0 ? 0 : static_cast<std::uint16_t>(best + 1);
    }
    return labels;
}

std::vector<Mask> connected_components(const Mask& binary) {
    std::vector<Mask> comps;
    std::vector<char> visited(binary.data.size(), 0);
    const int h = binary.h, w = binary.w;
    for (int si = 0; si < h; ++si)
        for (int sj = 0; sj < w; ++sj) {
            const std::size_t sidx = static_cast<std::size_t>(si) * w + sj;
            if (!binary.data[sidx] || visited[sidx]) continue;
            Mask comp(h, w);
            std::deque<std::pair<int, int>> queue{{si, sj}};
            visited[sidx] = 1;
            while (!queue.empty()) {
                const auto [i, j] = queue.front();
                queue.pop_front();
                comp.at(i, j) = 1;
                const int di[4] = {-1, 1, 0, 0};
                const int dj[4] = {0, 0, -1, 1};
                for (int t = 0; t < 4; ++t) {
                    const int ni = i + di[t], nj = j + dj[t];
                    if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                    const std::size_t nidx = static_cast<std::size_t>(ni) * w + nj;
                    if (binary.data[nidx] && !visited[nidx]) {
                        visited[nidx] = 1;
                        queue.emplace_back(ni, nj);
                    }
                }
            }
            comps.push_back(std::move(comp));
        }
    return comps;
}

double confidence_score(const Mask& mask, const Tensor& w_fg) {
    if (mask.h * mask.w != static_cast<int>(w_fg.numel()))
        throw std::invalid_argument("confidence_score: mask/map size mismatch");
    double acc = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < mask.data.size(); ++i)
        if (mask.data[i]) {
            acc += w_fg[static_cast<std::int64_t>(i)];
            ++count;
        }
    if (count == 0) throw std::invalid_argument("confidence_score: empty mask");
    return acc / count;
}

std::vector<Candidate> extract_candidates(const AttentionMaps& maps, int min_area,
                                          double conf_threshold) {
    const std::vector<std::uint16_t> labels = binarize_teacher(maps);
    const Tensor fg = maps.foreground();
    std::vector<Candidate> out;
    for (int k = 0; k < maps.num_slots(); ++k) {
        Mask slot_region(maps.h, maps.w);
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == static_cast<std::uint16_t>(k + 1)) slot_region.data[i] = 1;
        if (slot_region.empty()) continue;
        for (Mask& comp : connected_components(slot_region)) {
            if (comp.area() < min_area) continue;
            const double conf = confidence_score(comp, fg);
            if (conf < conf_threshold) continue;
            out.push_back({std::move(comp), conf, k});
        }
    }
    return out;
}

Mask resize_nearest(const Mask& m, int new_h, int new_w) {
    Mask out(new_h, new_w);
    // center-aligned sampling: source pixel under the center of each
    // destination pixel
    for (int i = 0; i < new_h; ++i) {
        const int si = std::min(m.h - 1, static_cast<int>(
            (static_cast<std::int64_t>(2 * i + 1) * m.h) / (2 * new_h)));
        for (int j = 0; j < new_w; ++j) {
            const int sj = std::min(m.w - 1, static_cast<int>(
                (static_cast<std::int64_t>(2 * j + 1) * m.w) / (2 * new_w)));
            out.at(i, j) = m.at(si, sj);
        }
    }
    return out;
}

MaskSet masks_from_labels(const LabelGrid& grid) {
    MaskSet set;
    std::uint16_t max_label = 0;
    for (std::uint16_t v : grid.labels) max_label = std::max(max_label, v);
    for (std::uint16_t k = 1; k <= max_label; ++k) {
        Mask m(grid.h, grid.w);
        bool any = false;
        for (std::size_t i = 0; i < grid.labels.size(); ++i)
            if (grid.labels[i] == k) {
                m.data[i] = 1;
                any = true;
            }
        if (any) set.masks.push_back(std::move(m));
    }
    return set;
}

LabelGrid labels_from_masks(const MaskSet& set, int h, int w) {
    LabelGrid grid;
    grid.h = h;
    grid.w = w;
    grid.labels.assign(static_cast<std::size_t>(h) * w, 0);
    std::uint16_t next = 1;
    for (const Mask& m : set.masks) {
        if (m.h != h || m.w != w)
            throw std::invalid_argument("labels_from_masks: mask shape mismatch");
        for (std::size_t i = 0; i < m.data.size(); ++i)
            if (m.data[i]) grid.labels[i] = next;
        ++next;
    }
    return grid;
}

LabelGrid load_label_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open PGM: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5") throw std::runtime_error("not a P5 PGM: " + path);
    auto next_token = [&f, &path]() {
        std::string tok;
        while (f >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(f, rest);
                continue;
            }
            return tok;
        }
        throw std::runtime_error("truncated PGM header: " + path);
    };
    LabelGrid grid;
    grid.w = std::stoi(next_token());
    grid.h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 65535) throw std::runtime_error("expected 16-bit PGM (maxval 65535): " + path);
    f.get();  // single whitespace after maxval
    grid.labels.resize(static_cast<std::size_t>(grid.h) * grid.w);
    for (auto& v : grid.labels) {
        const int hi = f.get(), lo = f.get();
        if (hi < 0 || lo < 0) throw std::runtime_error("truncated PGM data: " + path);
        v = static_cast<std::uint16_t>((hi << 8) | lo);
    }
    return grid;
}

void save_label_pgm(const LabelGrid& grid, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write PGM: " + path);
    f << "P5\n" << grid.w << " " << grid.h << "\n65535\n";
    for (std::uint16_t v : grid.labels) {
        f.put(static_cast<char>((v >> 8) & 0xff));
        f.put(static_cast<char>(v & 0xff));
    }
}

}  // namespace modisc::pseudolabel
