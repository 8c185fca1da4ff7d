#include "modisc/slotcore.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace modisc::slotcore {

Tensor& ModelParams::find(const std::string& name) {
    for (auto& [n, t] : tensors)
        if (n == name) return t;
    throw std::invalid_argument("ModelParams: unknown tensor '" + name + "'");
}

const Tensor& ModelParams::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw std::invalid_argument("ModelParams: unknown tensor '" + name + "'");
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    ModelParams p;
    p.config = config;
    std::mt19937_64 rng(seed);
    const int d = config.feat_dim;
    const int c1 = config.enc_c1, c2 = config.enc_c2;
    const int s_total = config.total_slots();

    auto conv = [&](const std::string& name, int out, int in) {
        const double std = std::sqrt(2.0 / (in * 9.0));
        p.tensors.emplace_back(name + "_w", Tensor::randn({out, in, 3, 3}, rng, std));
        p.tensors.emplace_back(name + "_b", Tensor::zeros({out}));
    };
    auto linear = [&](const std::string& name, int in, int out, bool bias = true) {
        const double std = std::sqrt(1.0 / in);
        p.tensors.emplace_back(name + "_w", Tensor::randn({in, out}, rng, std));
        if (bias) p.tensors.emplace_back(name + "_b", Tensor::zeros({out}));
    };
    auto layernorm = [&](const std::string& name, int width) {
        p.tensors.emplace_back(name + "_g", Tensor::full({width}, 1.0));
        p.tensors.emplace_back(name + "_b", Tensor::zeros({width}));
    };

    conv("enc1", c1, config.in_channels);
    conv("enc2", c2, c1);
    conv("enc3", d, c2);
    conv("enc4", d, d);
    linear("pos", 4, d, false);
    layernorm("ln_in", d);

    p.tensors.emplace_back("slot_init", Tensor::randn({s_total, d}, rng, 0.5));
    layernorm("ln_q", d);
    linear("proj_k", d, d, false);
    linear("proj_q", d, d, false);
    linear("proj_v", d, d, false);
    linear("gru_uz", d, d, false);
    linear("gru_sz", d, d);
    linear("gru_ur", d, d, false);
    linear("gru_sr", d, d);
    linear("gru_uh", d, d, false);
    linear("gru_sh", d, d);
    layernorm("ln_slot", d);
    linear("mlp1", d, d);
    linear("mlp2", d, d);

    conv("dec1", c2, d);
    conv("dec2", c1, c2);
    conv("dec3", config.out_channels, c1);
    return p;
}

namespace {

Tensor make_coord_grid(int h, int w) {
    Tensor grid({4, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double y = h > 1 ? static_cast<double>(i) / (h - 1) : 0.0;
            const double x = w > 1 ? static_cast<double>(j) / (w - 1) : 0.0;
            grid.at(0, i, j) = x;
            grid.at(1, i, j) = y;
            grid.at(2, i, j) = 1.0 - x;
            grid.at(3, i, j) = 1.0 - y;
        }
    return grid;
}

}  // namespace

Model::Model(const ModelParams& params, bool requires_grad)
    : config_(params.config),
      coord_grid_(make_coord_grid(params.config.feat_h(), params.config.feat_w())) {
    leaves_.reserve(params.tensors.size());
    for (const auto& [name, t] : params.tensors)
        leaves_.emplace_back(name, requires_grad ? ad::leaf(t, name) : ad::constant(t, name));
}

ad::Var Model::param(const std::string& name) const {
    for (const auto& [n, v] : leaves_)
        if (n == name) return v;
    throw std::invalid_argument("Model: unknown parameter '" + name + "'");
}

ad::Var Model::initial_slots() const { return param("slot_init"); }

ad::Var Model::encode_frame(const Tensor& frame) const {
    if (frame.ndim() != 3 || frame.dim(0) != config_.in_channels ||
        frame.dim(1) != config_.height || frame.dim(2) != config_.width)
        throw std::invalid_argument("encode_frame: frame shape " + shape_str(frame.shape()) +
                                    " does not match model config");
    ad::Var x = ad::constant(frame, "frame");
    x = ad::relu(ad::conv2d(x, param("enc1_w"), param("enc1_b"), 2, 1));
    x = ad::relu(ad::conv2d(x, param("enc2_w"), param("enc2_b"), 2, 1));
    x = ad::relu(ad::conv2d(x, param("enc3_w"), param("enc3_b"), 1, 1));
    x = ad::conv2d(x, param("enc4_w"), param("enc4_b"), 1, 1);
    ad::Var feats = ad::chw_to_nc(x);  // [N, D]
    ad::Var pos =
        ad::matmul(ad::chw_to_nc(ad::constant(coord_grid_, "coords")), param("pos_w"));
    feats = ad::add(feats, pos);
    return ad::layer_norm_rows(feats, param("ln_in_g"), param("ln_in_b"));
}

Model::StepOut Model::attention_step(const ad::Var& features, const ad::Var& slots_prev) const {
    const int d = config_.feat_dim;
    if (slots_prev->value.ndim() != 2 || slots_prev->value.dim(1) != d)
        throw std::invalid_argument("attention_step: slot state width mismatch");
    ad::Var k = ad::matmul(features, param("proj_k_w"));
    ad::Var v = ad::matmul(features, param("proj_v_w"));
    ad::Var q = ad::matmul(
        ad::layer_norm_rows(slots_prev, param("ln_q_g"), param("ln_q_b")), param("proj_q_w"));
    ad::Var scores = ad::scale(ad::matmul(k, q, false, true), 1.0 / std::sqrt(double(d)));
    ad::Var attn = ad::softmax_rows(scores);  // [N, S]
    if (!attn->value.all_finite())
        throw std::runtime_error("attention_step: non-finite attention weights");

    ad::Var updates = ad::matmul(ad::normalize_columns(attn), v, true, false);  // [S, D]
    // gated recurrent update
    ad::Var z = ad::sigmoid(ad::add(ad::matmul(updates, param("gru_uz_w")),
                                    ad::add_rowvec(ad::matmul(slots_prev, param("gru_sz_w")),
                                                   param("gru_sz_b"))));
    ad::Var r = ad::sigmoid(ad::add(ad::matmul(updates, param("gru_ur_w")),
                                    ad::add_rowvec(ad::matmul(slots_prev, param("gru_sr_w")),
                                                   param("gru_sr_b"))));
    ad::Var hbar = ad::tanh_v(ad::add(
        ad::matmul(updates, param("gru_uh_w")),
        ad::add_rowvec(ad::matmul(ad::mul(r, slots_prev), param("gru_sh_w")),
                       param("gru_sh_b"))));
    ad::Var one_minus_z = ad::scale(ad::add_scalar(ad::scale(z, -1.0), 1.0), 1.0);
    ad::Var slots = ad::add(ad::mul(one_minus_z, hbar), ad::mul(z, slots_prev));
    // residual transform
    ad::Var resid = ad::layer_norm_rows(slots, param("ln_slot_g"), param("ln_slot_b"));
    resid = ad::add_rowvec(ad::matmul(resid, param("mlp1_w")), param("mlp1_b"));
    resid = ad::relu(resid);
    resid = ad::add_rowvec(ad::matmul(resid, param("mlp2_w")), param("mlp2_b"));
    slots = ad::add(slots, resid);
    if (!slots->value.all_finite())
        throw std::runtime_error("attention_step: non-finite slot state");
    return {attn, slots};
}

ad::Var Model::decode(const ad::Var& features, int target_h, int target_w) const {
    if (features->value.ndim() != 2 || features->value.dim(1) != config_.feat_dim)
        throw std::invalid_argument("decode: expected [N,D] features");
    const int n = features->value.dim(0);
    if (target_h % 4 != 0 || target_w % 4 != 0 || (target_h / 4) * (target_w / 4) != n)
        throw std::invalid_argument("decode: target shape incompatible with feature grid");
    const int fh = target_h / 4, fw = target_w / 4;
    ad::Var x = ad::nc_to_chw(features, fh, fw);
    x = ad::relu(ad::conv2d(x, param("dec1_w"), param("dec1_b"), 1, 1));
    x = ad::upsample_nearest2(x);
    x = ad::relu(ad::conv2d(x, param("dec2_w"), param("dec2_b"), 1, 1));
    x = ad::upsample_nearest2(x);
    return ad::conv2d(x, param("dec3_w"), param("dec3_b"), 1, 1);
}

std::vector<Model::FrameOut> Model::forward_video(const std::vector<Tensor>& frames) const {
    if (frames.empty()) throw std::invalid_argument("forward_video: empty frame list");
    std::vector<FrameOut> outs;
    outs.reserve(frames.size());
    ad::Var slots = initial_slots();
    for (const Tensor& frame : frames) {
        FrameOut fo;
        fo.features = encode_frame(frame);
        StepOut step = attention_step(fo.features, slots);
        // extra refinement iterations on the first frame only: later frames
        // start from an already object-bound slot state
        if (&frame == &frames.front())
            for (int it = 1; it < config_.attn_iters; ++it)
                step = attention_step(fo.features, step.slots);
        fo.attention = step.attention;
        fo.slots = step.slots;
        slots = step.slots;
        fo.decoded = decode(fo.features, config_.height, config_.width);
        fo.maps = extract_attention(fo.attention, config_);
        outs.push_back(std::move(fo));
    }
    return outs;
}

std::vector<Tensor> Model::collect_gradients() const {
    std::vector<Tensor> grads;
    grads.reserve(leaves_.size());
    for (const auto& [name, v] : leaves_) {
        Tensor g = v->grad.numel() > 0 ? v->grad : Tensor::zeros(v->value.shape());
        if (!g.all_finite())
            throw std::runtime_error("collect_gradients: non-finite gradient for '" + name + "'");
        grads.push_back(std::move(g));
    }
    return grads;
}

AttentionMaps extract_attention(const ad::Var& attention, const ModelConfig& config) {
    AttentionMaps maps;
    maps.h = config.feat_h();
    maps.w = config.feat_w();
    const int n = config.num_positions();
    const int k = config.num_slots;
    maps.slots = Tensor({n, k});
    maps.background = Tensor({n});
    for (int i = 0; i < n; ++i) {
        for (int s = 0; s < k; ++s) maps.slots.at(i, s) = attention->value.at(i, s);
        maps.background[i] =
            config.background_slot ? attention->value.at(i, k) : 0.0;
    }
    return maps;
}

FeatureMap encode(const Tensor& frame, const ModelParams& params) {
    Model model(params, false);
    ad::Var f = model.encode_frame(frame);
    FeatureMap fm;
    fm.h = params.config.feat_h();
    fm.w = params.config.feat_w();
    fm.d = params.config.feat_dim;
    fm.values = f->value;
    return fm;
}

std::pair<AttentionMaps, SlotState> slot_attention_step(const FeatureMap& features,
                                                        const SlotState& prev,
                                                        const ModelParams& params) {
    Model model(params, false);
    Model::StepOut step =
        model.attention_step(ad::constant(features.values, "features"),
                             ad::constant(prev.slots, "slots_prev"));
    return {extract_attention(step.attention, params.config), SlotState{step.slots->value}};
}

// --- checkpoint container ---

namespace {

constexpr char kMagic[4] = {'M', 'O', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void save_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const std::string& path, bool as_f32) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, 4);
    write_u32(f, kVersion);
    write_u32(f, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        write_u32(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        f.put(as_f32 ? 0 : 1);
        f.put(static_cast<char>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) write_u32(f, static_cast<std::uint32_t>(t.dim(i)));
        if (as_f32) {
            for (std::int64_t i = 0; i < t.numel(); ++i) {
                const float v = static_cast<float>(t[i]);
                f.write(reinterpret_cast<const char*>(&v), sizeof(v));
            }
        } else {
            f.write(reinterpret_cast<const char*>(t.data()),
                    static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
    }
    if (!f) throw std::runtime_error("short write to checkpoint: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    if (read_u32(f) != kVersion) throw std::runtime_error("unsupported checkpoint version: " + path);
    const std::uint32_t count = read_u32(f);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const int dtype = f.get();
        const int ndim = f.get();
        if (!f || ndim < 0 || ndim > 8) throw std::runtime_error("bad checkpoint tensor header");
        std::vector<int> shape(static_cast<std::size_t>(ndim));
        for (auto& d : shape) d = static_cast<int>(read_u32(f));
        Tensor t(shape);
        if (dtype == 0) {
            for (std::int64_t j = 0; j < t.numel(); ++j) {
                float v;
                f.read(reinterpret_cast<char*>(&v), sizeof(v));
                t[j] = v;
            }
        } else if (dtype == 1) {
            f.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.numel() * sizeof(double)));
        } else {
            throw std::runtime_error("unknown dtype in checkpoint: " + path);
        }
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    auto tensors = params.tensors;
    Tensor meta({7});
    meta[0] = params.config.in_channels;
    meta[1] = params.config.out_channels;
    meta[2] = params.config.height;
    meta[3] = params.config.width;
    meta[4] = params.config.feat_dim;
    meta[5] = params.config.num_slots;
    meta[6] = params.config.background_slot ? 1.0 : 0.0;
    tensors.emplace_back("__config", std::move(meta));
    Tensor enc({2});
    enc[0] = params.config.enc_c1;
    enc[1] = params.config.enc_c2;
    tensors.emplace_back("__config_enc", std::move(enc));
    save_tensors(tensors, path);
}

ModelParams load_checkpoint(const ModelConfig& expected, const std::string& path) {
    auto tensors = load_tensors(path);
    ModelParams params;
    params.config = expected;
    for (auto& [name, t] : tensors) {
        if (name == "__config") {
            if (static_cast<int>(t[0]) != expected.in_channels ||
                static_cast<int>(t[2]) != expected.height ||
                static_cast<int>(t[3]) != expected.width ||
                static_cast<int>(t[4]) != expected.feat_dim ||
                static_cast<int>(t[5]) != expected.num_slots)
                throw std::runtime_error("checkpoint/model config mismatch: " + path);
            continue;
        }
        if (name == "__config_enc") continue;
        params.tensors.emplace_back(std::move(name), std::move(t));
    }
    // shape sanity against a freshly initialized layout
    ModelParams ref = ModelParams::init(expected, 0);
    if (ref.tensors.size() != params.tensors.size())
        throw std::runtime_error("checkpoint tensor count mismatch: " + path);
    for (std::size_t i = 0; i < ref.tensors.size(); ++i)
        if (ref.tensors[i].first != params.tensors[i].first ||
            !(ref.tensors[i].second.shape() == params.tensors[i].second.shape()))
            throw std::runtime_error("checkpoint tensor layout mismatch at '" +
                                     params.tensors[i].first + "': " + path);
    return params;
}

}  // namespace modisc::slotcore
