#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modisc/attention.hpp"
#include "modisc/autodiff.hpp"
#include "modisc/tensor.hpp"

namespace modisc::slotcore {

// Compact 4-layer convolutional encoder (stride 4 total), recurrent
// slot attention with an optional background slot, and a shared
// upsampling decoder.
struct ModelConfig {
    int in_channels = 3;   // 3 for RGB, 4 for XYZd front views
    int out_channels = 3;  // decoder output channels
    int height = 64;       // input H'
    int width = 128;       // input W'
    int feat_dim = 64;     // D
    int num_slots = 4;     // K foreground slots
    bool background_slot = true;
    int enc_c1 = 16;
    int enc_c2 = 32;
    int attn_iters = 1;  // attention refinements on the first frame (warm-up from slot_init)

    int total_slots() const { return num_slots + (background_slot ? 1 : 0); }
    int feat_h() const { return height / 4; }
    int feat_w() const { return width / 4; }
    int num_positions() const { return feat_h() * feat_w(); }
};

struct ModelParams {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;  // fixed order

    Tensor& find(const std::string& name);
    const Tensor& find(const std::string& name) const;

    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
};

struct FeatureMap {
    int h = 0, w = 0, d = 0;
    Tensor values;  // [h*w, D], position-major
};

struct SlotState {
    Tensor slots;  // [S_total, D]
};

// One forward/backward pass over a parameter set. Parameters are bound
// into graph leaves at construction; gradients accumulate across frames
// of a video and across video items until collect_gradients().
class Model {
public:
    Model(const ModelParams& params, bool requires_grad);

    const ModelConfig& config() const { return config_; }
    ad::Var param(const std::string& name) const;

    ad::Var initial_slots() const;
    ad::Var encode_frame(const Tensor& frame) const;

    struct StepOut {
        ad::Var attention;  // [N, S_total], rows sum to 1
        ad::Var slots;      // [S_total, D]
    };
    StepOut attention_step(const ad::Var& features, const ad::Var& slots_prev) const;

    ad::Var decode(const ad::Var& features, int target_h, int target_w) const;

    struct FrameOut {
        ad::Var features;   // [N, D]
        ad::Var attention;  // [N, S_total]
        ad::Var slots;
        ad::Var decoded;    // [out_channels, H, W]
        AttentionMaps maps;  // extracted values
    };
    // Recurrent application over a frame sequence: slots from frame t-1
    // seed frame t. Throws on non-finite intermediates.
    std::vector<FrameOut> forward_video(const std::vector<Tensor>& frames) const;

    // Gradients aligned with ModelParams::tensors order; zeros where a
    // parameter was unused. Throws with the parameter name on a
    // non-finite gradient.
    std::vector<Tensor> collect_gradients() const;

private:
    ModelConfig config_;
    std::vector<std::pair<std::string, ad::Var>> leaves_;
    Tensor coord_grid_;  // [4, h, w] positional encoding basis
};

// Value-level wrappers matching the module operations.
FeatureMap encode(const Tensor& frame, const ModelParams& params);
std::pair<AttentionMaps, SlotState> slot_attention_step(const FeatureMap& features,
                                                        const SlotState& prev,
                                                        const ModelParams& params);

AttentionMaps extract_attention(const ad::Var& attention, const ModelConfig& config);

// --- checkpoint container ---
// Binary, versioned: magic "MODC", u32 version, u32 tensor count; per
// tensor a name, dtype (f32 or f64), dims, and little-endian payload.
void save_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const std::string& path, bool as_f32 = false);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const ModelConfig& expected, const std::string& path);

}  // namespace modisc::slotcore
