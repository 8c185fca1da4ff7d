#include "modisc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace modisc::losses {

namespace {

constexpr double kEps = 1e-7;

double clamp_prob(double p) { return std::clamp(p, kEps, 1.0 - kEps); }

bool interior(double p) { return p > kEps && p < 1.0 - kEps; }

}  // namespace

ad::Var weighted_bce(const SupervisionTarget& target, const ad::Var& attention_col) {
    const auto n = attention_col->value.numel();
    if (static_cast<std::int64_t>(target.mask.data.size()) != n)
        throw std::invalid_argument("weighted_bce: mask/map length mismatch");
    const double s = target.confidence;
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double w = clamp_prob(attention_col->value[i]);
        if (target.mask.data[static_cast<std::size_t>(i)])
            acc -= (1.0 + s) * std::log(w);
        else
            acc -= std::log(1.0 - w);
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(n);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(target.mask.data);
    return ad::make_node(
        std::move(out), {attention_col},
        [attention_col, mask, s, n](ad::Node& nd) {
            if (attention_col->grad.numel() == 0)
                attention_col->grad = Tensor::zeros(attention_col->value.shape());
            const double g = nd.grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double raw = attention_col->value[i];
                if (!interior(raw)) continue;  // clamp region, zero slope
                if ((*mask)[static_cast<std::size_t>(i)])
                    attention_col->grad[i] -= g * (1.0 + s) / raw;
                else
                    attention_col->grad[i] += g / (1.0 - raw);
            }
        },
        "weighted_bce");
}

ad::Var completion_mse(const ad::Var& pred, const pcproj::FrontViewImage& target) {
    if (pred->value.ndim() != 3 || pred->value.dim(0) != 4 ||
        pred->value.dim(1) != target.height || pred->value.dim(2) != target.width)
        throw std::invalid_argument("completion_mse: prediction/target shape mismatch");
    if (target.valid_set.empty())
        throw std::invalid_argument("completion_mse: empty valid set");

    const auto denom = static_cast<double>(target.valid_set.size()) * 4.0;
    double acc = 0.0;
    for (const auto& [i, j] : target.valid_set)
        for (int c = 0; c < 4; ++c) {
            const double d = pred->value.at(c, i, j) - target.channels.at(c, i, j);
            acc += d * d;
        }
    Tensor out({1});
    out[0] = acc / denom;
    auto valid = std::make_shared<std::vector<pcproj::PixelCoord>>(target.valid_set.begin(),
                                                                   target.valid_set.end());
    auto tgt = std::make_shared<Tensor>(target.channels);
    return ad::make_node(
        std::move(out), {pred},
        [pred, valid, tgt, denom](ad::Node& nd) {
            if (pred->grad.numel() == 0) pred->grad = Tensor::zeros(pred->value.shape());
            const double g = nd.grad[0] * 2.0 / denom;
            for (const auto& [i, j] : *valid)
                for (int c = 0; c < 4; ++c)
                    pred->grad.at(c, i, j) +=
                        g * (pred->value.at(c, i, j) - tgt->at(c, i, j));
        },
        "completion_mse");
}

ad::Var background_nll(const ad::Var& w_bg, const std::vector<std::uint8_t>& covered) {
    const auto n = w_bg->value.numel();
    if (static_cast<std::int64_t>(covered.size()) != n)
        throw std::invalid_argument("background_nll: length mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double w = clamp_prob(w_bg->value[i]);
        acc -= covered[static_cast<std::size_t>(i)] ? std::log(1.0 - w) : std::log(w);
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(n);
    auto cov = std::make_shared<std::vector<std::uint8_t>>(covered);
    return ad::make_node(
        std::move(out), {w_bg},
        [w_bg, cov, n](ad::Node& nd) {
            if (w_bg->grad.numel() == 0) w_bg->grad = Tensor::zeros(w_bg->value.shape());
            const double g = nd.grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double raw = w_bg->value[i];
                if (!interior(raw)) continue;
                if ((*cov)[static_cast<std::size_t>(i)])
                    w_bg->grad[i] += g / (1.0 - raw);
                else
                    w_bg->grad[i] -= g / raw;
            }
        },
        "background_nll");
}

const char* modality_name(Modality m) { return m == Modality::m2d ? "2d" : "3d"; }

ad::Var total_loss(Modality branch, Phase phase, const std::vector<LossTerm>& parts) {
    ad::Var total = ad::constant(Tensor::zeros({1}), "total_loss");
    for (const LossTerm& term : parts) {
        if (term.dist_source.has_value() != term.dist_target.has_value())
            throw std::invalid_argument("total_loss: distillation term '" + term.label +
                                        "' must carry both source and target");
        if (term.dist_source) {
            if (phase == Phase::burn_in)
                throw std::invalid_argument("total_loss: distillation term '" + term.label +
                                            "' during burn-in");
            if (*term.dist_source == *term.dist_target)
                throw std::invalid_argument("total_loss: intra-modal distillation term '" +
                                            term.label + "'");
            if (*term.dist_target != branch)
                throw std::invalid_argument("total_loss: term '" + term.label +
                                            "' routed to the wrong branch");
        }
        if (term.value->value.numel() != 1)
            throw std::invalid_argument("total_loss: non-scalar part '" + term.label + "'");
        total = ad::add(total, ad::scale(term.value, term.weight));
    }
    return total;
}

}  // namespace modisc::losses
