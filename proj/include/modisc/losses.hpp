#pragma once

#include <optional>
#include <string>
#include <vector>

#include "modisc/autodiff.hpp"
#include "modisc/pcproj.hpp"
#include "modisc/pseudolabel.hpp"

namespace modisc::losses {

enum class Modality { m2d, m3d };
enum class Phase { burn_in, distill };

enum class TargetSource { motion2d, motion3d, teacher2d, teacher3d };

struct SupervisionTarget {
    pseudolabel::Mask mask;
    double confidence = 0.0;  // s in [0,1]
    TargetSource source = TargetSource::motion2d;
};

// Confidence-weighted BCE of an attention map column against a binary
// target:
//   -(1/N) sum_i [(1+s) m(i) log W(i) + (1-m(i)) log(1-W(i))]
// Map values are clamped to [1e-7, 1-1e-7] before the logs.
ad::Var weighted_bce(const SupervisionTarget& target, const ad::Var& attention_col);

// Mean squared error over valid front-view pixels only, averaged over
// the 4 channels. pred: [4,H,W]. Throws if the valid set is empty.
ad::Var completion_mse(const ad::Var& pred, const pcproj::FrontViewImage& target);

// -(1/N) sum_i [(1-covered(i)) log Wbg(i) + covered(i) log(1-Wbg(i))]
ad::Var background_nll(const ad::Var& w_bg, const std::vector<std::uint8_t>& covered);

struct LossTerm {
    std::string label;
    ad::Var value;
    double weight = 1.0;
    // Set on distillation terms only: pseudo-label source and the
    // student modality it supervises.
    std::optional<Modality> dist_source;
    std::optional<Modality> dist_target;
};

// Weighted sum of phase-consistent parts. Rejects any intra-modal
// distillation term, any distillation term during burn-in, and terms
// routed to a different branch.
ad::Var total_loss(Modality branch, Phase phase, const std::vector<LossTerm>& parts);

const char* modality_name(Modality m);

}  // namespace modisc::losses
