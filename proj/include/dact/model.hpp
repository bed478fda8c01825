#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/rng.hpp"
#include "dact/tensor.hpp"

namespace dact {

// Interleaved sin/cos encoding at geometric frequencies:
//   enc[2j] = sin(i * w_j), enc[2j+1] = cos(i * w_j), w_j = 10000^(-2j/dim).
inline std::vector<double> sinusoidal_encoding(int64_t i, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_encoding: dim must be positive and even");
    std::vector<double> enc(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int j = 0; j < half; ++j) {
        const double w = std::pow(10000.0, -2.0 * j / dim);
        enc[static_cast<size_t>(2 * j)] = std::sin(static_cast<double>(i) * w);
        enc[static_cast<size_t>(2 * j + 1)] = std::cos(static_cast<double>(i) * w);
    }
    return enc;
}

// Constant [B, dim] tensor of per-row step encodings.
template <class Real>
Tensor<Real> sinusoidal_batch(const std::vector<int>& steps, int dim) {
    auto t = Tensor<Real>::zeros({static_cast<int64_t>(steps.size()), dim});
    for (size_t r = 0; r < steps.size(); ++r) {
        const auto enc = sinusoidal_encoding(steps[r], dim);
        for (int j = 0; j < dim; ++j) t.data()[static_cast<int64_t>(r) * dim + j] = static_cast<Real>(enc[static_cast<size_t>(j)]);
    }
    return t;
}

struct DiTConfig {
    int num_layers = 3;
    int embed_dim = 128;
    int num_heads = 4;
    int horizon = 15;  // N future steps; the model predicts N+1 actions
    int action_dim = 7;
    int cond_dim = 256;
    int step_freq_dim = 256;  // width of the raw sinusoidal step encoding
    bool with_null_cond = true;

    int seq_len() const { return horizon + 1; }
    int context_length() const { return horizon + 2; }

    void validate() const {
        if (num_layers < 1 || embed_dim < 1 || num_heads < 1) throw std::invalid_argument("DiTConfig: bad sizes");
        if (embed_dim % num_heads != 0) throw std::invalid_argument("DiTConfig: embed_dim not divisible by num_heads");
        if (horizon < 0) throw std::invalid_argument("DiTConfig: horizon must be >= 0");
        if (step_freq_dim % 2 != 0) throw std::invalid_argument("DiTConfig: step_freq_dim must be even");
    }

    NLOHMANN_DEFINE_TYPE_INTRUSIVE(DiTConfig, num_layers, embed_dim, num_heads, horizon, action_dim, cond_dim,
                                   step_freq_dim, with_null_cond)
};

struct MLPConfig {
    int num_layers = 3;
    int hidden_dim = 256;
    int horizon = 15;
    int action_dim = 7;
    int cond_dim = 256;
    int step_freq_dim = 256;
    bool with_null_cond = true;

    int seq_len() const { return horizon + 1; }

    void validate() const {
        if (num_layers < 1 || hidden_dim < 1) throw std::invalid_argument("MLPConfig: bad sizes");
        if (horizon < 0) throw std::invalid_argument("MLPConfig: horizon must be >= 0");
        if (step_freq_dim % 2 != 0) throw std::invalid_argument("MLPConfig: step_freq_dim must be even");
    }

    NLOHMANN_DEFINE_TYPE_INTRUSIVE(MLPConfig, num_layers, hidden_dim, horizon, action_dim, cond_dim, step_freq_dim,
                                   with_null_cond)
};

namespace detail {

template <class Real>
void add_linear(ParamStore<Real>& ps, const std::string& name, int64_t in, int64_t out, uint64_t seed) {
    ps.add(name + ".w", init_trunc_normal<Real>({in, out}, seed, name + ".w"));
    ps.add(name + ".b", Tensor<Real>::zeros({out}));
}

template <class Real>
void add_layer_norm(ParamStore<Real>& ps, const std::string& name, int64_t dim) {
    ps.add(name + ".g", Tensor<Real>::filled({dim}, Real(1)));
    ps.add(name + ".b", Tensor<Real>::zeros({dim}));
}

template <class Real>
Tensor<Real> linear(const ParamStore<Real>& ps, const std::string& name, const Tensor<Real>& x) {
    return add(matmul(x, ps.at(name + ".w")), ps.at(name + ".b"));
}

template <class Real>
Tensor<Real> apply_layer_norm(const ParamStore<Real>& ps, const std::string& name, const Tensor<Real>& x) {
    return layer_norm(x, ps.at(name + ".g"), ps.at(name + ".b"));
}

}  // namespace detail

// Diffusion transformer over N+2 tokens: one condition token (cognition
// feature + denoise-step embedding) followed by N+1 linearly embedded action
// tokens with learned positional embeddings. Full self-attention, pre-LN
// blocks, shared linear output head over the action-token positions.
template <class Real>
class DiT {
public:
    static DiT build(const DiTConfig& cfg, uint64_t seed) {
        cfg.validate();
        DiT m;
        m.cfg_ = cfg;
        auto& ps = m.params_;
        const int64_t d = cfg.embed_dim;
        detail::add_linear(ps, "cond_proj", cfg.cond_dim, d, seed);
        detail::add_linear(ps, "t_embed.fc1", cfg.step_freq_dim, d, seed);
        detail::add_linear(ps, "t_embed.fc2", d, d, seed);
        detail::add_linear(ps, "act_embed", cfg.action_dim, d, seed);
        ps.add("pos_embed", init_trunc_normal<Real>({cfg.seq_len(), d}, seed, "pos_embed"));
        if (cfg.with_null_cond)
            ps.add("null_cond", init_trunc_normal<Real>({cfg.cond_dim}, seed, "null_cond"));
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            detail::add_layer_norm(ps, p + "ln1", d);
            detail::add_linear(ps, p + "attn.q", d, d, seed);
            detail::add_linear(ps, p + "attn.k", d, d, seed);
            detail::add_linear(ps, p + "attn.v", d, d, seed);
            detail::add_linear(ps, p + "attn.o", d, d, seed);
            detail::add_layer_norm(ps, p + "ln2", d);
            detail::add_linear(ps, p + "mlp.fc1", d, 4 * d, seed);
            detail::add_linear(ps, p + "mlp.fc2", 4 * d, d, seed);
        }
        detail::add_layer_norm(ps, "final_ln", d);
        detail::add_linear(ps, "head", d, cfg.action_dim, seed);
        return m;
    }

    // noisy: [B, N+1, action_dim]; cond: [B, cond_dim]; steps: per-row denoise
    // step indices. Returns predicted noise [B, N+1, action_dim].
    Tensor<Real> forward(const Tensor<Real>& noisy, const Tensor<Real>& cond, const std::vector<int>& steps) const {
        const int64_t B = check_inputs(noisy, cond, steps.size());
        const int64_t S = cfg_.seq_len(), d = cfg_.embed_dim;

        auto act_tok = add(matmul(noisy, params_.at("act_embed.w")), params_.at("act_embed.b"));
        act_tok = add(act_tok, params_.at("pos_embed"));  // broadcast [S,d] over batch

        auto t_enc = sinusoidal_batch<Real>(steps, cfg_.step_freq_dim);
        auto t_feat = detail::linear(params_, "t_embed.fc2", gelu(detail::linear(params_, "t_embed.fc1", t_enc)));
        auto cond_tok = add(detail::linear(params_, "cond_proj", cond), t_feat);

        auto h = concat<Real>({reshape(cond_tok, {B, 1, d}), act_tok}, 1);
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            auto x = detail::apply_layer_norm(params_, p + "ln1", h);
            auto att = attention(detail::linear(params_, p + "attn.q", x), detail::linear(params_, p + "attn.k", x),
                                 detail::linear(params_, p + "attn.v", x), cfg_.num_heads);
            h = add(h, detail::linear(params_, p + "attn.o", att));
            auto y = detail::apply_layer_norm(params_, p + "ln2", h);
            h = add(h, detail::linear(params_, p + "mlp.fc2", gelu(detail::linear(params_, p + "mlp.fc1", y))));
        }
        h = detail::apply_layer_norm(params_, "final_ln", h);
        auto out = add(matmul(h, params_.at("head.w")), params_.at("head.b"));
        return slice(out, 1, 1, S);  // drop the condition-token output
    }

    const DiTConfig& config() const { return cfg_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }

    bool has_null_cond() const { return cfg_.with_null_cond; }
    const Tensor<Real>& null_cond() const { return params_.at("null_cond"); }

private:
    int64_t check_inputs(const Tensor<Real>& noisy, const Tensor<Real>& cond, size_t n_steps) const {
        if (noisy.ndim() != 3 || noisy.dim(1) != cfg_.seq_len() || noisy.dim(2) != cfg_.action_dim)
            shape_error("DiT::forward: noisy must be [B," + std::to_string(cfg_.seq_len()) + "," +
                        std::to_string(cfg_.action_dim) + "], got " + shape_str(noisy.shape()));
        if (cond.ndim() != 2 || cond.dim(0) != noisy.dim(0) || cond.dim(1) != cfg_.cond_dim)
            shape_error("DiT::forward: cond must be [B," + std::to_string(cfg_.cond_dim) + "], got " +
                        shape_str(cond.shape()));
        if (static_cast<int64_t>(n_steps) != noisy.dim(0)) shape_error("DiT::forward: steps length != batch");
        return noisy.dim(0);
    }

    DiTConfig cfg_;
    ParamStore<Real> params_;
};

// MLP denoiser baseline. Input = [flattened actions ++ cond ++ step encoding]
// projected to hidden_dim; residual blocks re-inject the condition through a
// per-block projection, then expand the hidden dim by 4x and scale it back.
template <class Real>
class MlpDenoiser {
public:
    static MlpDenoiser build(const MLPConfig& cfg, uint64_t seed) {
        cfg.validate();
        MlpDenoiser m;
        m.cfg_ = cfg;
        auto& ps = m.params_;
        const int64_t h = cfg.hidden_dim;
        const int64_t flat = static_cast<int64_t>(cfg.seq_len()) * cfg.action_dim;
        detail::add_linear(ps, "in_proj", flat + cfg.cond_dim + cfg.step_freq_dim, h, seed);
        if (cfg.with_null_cond)
            ps.add("null_cond", init_trunc_normal<Real>({cfg.cond_dim}, seed, "null_cond"));
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            detail::add_linear(ps, p + "cond_proj", cfg.cond_dim, h, seed);
            detail::add_layer_norm(ps, p + "ln", h);
            detail::add_linear(ps, p + "fc1", h, 4 * h, seed);
            detail::add_linear(ps, p + "fc2", 4 * h, h, seed);
        }
        detail::add_layer_norm(ps, "final_ln", h);
        detail::add_linear(ps, "head", h, flat, seed);
        return m;
    }

    Tensor<Real> forward(const Tensor<Real>& noisy, const Tensor<Real>& cond, const std::vector<int>& steps) const {
        if (noisy.ndim() != 3 || noisy.dim(1) != cfg_.seq_len() || noisy.dim(2) != cfg_.action_dim)
            shape_error("MlpDenoiser::forward: noisy must be [B," + std::to_string(cfg_.seq_len()) + "," +
                        std::to_string(cfg_.action_dim) + "], got " + shape_str(noisy.shape()));
        if (cond.ndim() != 2 || cond.dim(0) != noisy.dim(0) || cond.dim(1) != cfg_.cond_dim)
            shape_error("MlpDenoiser::forward: bad cond shape " + shape_str(cond.shape()));
        if (static_cast<int64_t>(steps.size()) != noisy.dim(0)) shape_error("MlpDenoiser::forward: steps length != batch");
        const int64_t B = noisy.dim(0);
        const int64_t flat = static_cast<int64_t>(cfg_.seq_len()) * cfg_.action_dim;

        auto t_enc = sinusoidal_batch<Real>(steps, cfg_.step_freq_dim);
        auto x = concat<Real>({reshape(noisy, {B, flat}), cond, t_enc}, 1);
        auto h = detail::linear(params_, "in_proj", x);
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            h = add(h, detail::linear(params_, p + "cond_proj", cond));
            auto y = detail::apply_layer_norm(params_, p + "ln", h);
            h = add(h, detail::linear(params_, p + "fc2", gelu(detail::linear(params_, p + "fc1", y))));
        }
        h = detail::apply_layer_norm(params_, "final_ln", h);
        auto out = detail::linear(params_, "head", h);
        return reshape(out, {B, cfg_.seq_len(), cfg_.action_dim});
    }

    const MLPConfig& config() const { return cfg_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }

    bool has_null_cond() const { return cfg_.with_null_cond; }
    const Tensor<Real>& null_cond() const { return params_.at("null_cond"); }

private:
    MLPConfig cfg_;
    ParamStore<Real> params_;
};

// Either backbone behind one denoiser interface.
template <class Real>
class ActionModel {
public:
    ActionModel() = default;
    explicit ActionModel(DiT<Real> m) : impl_(std::move(m)) {}
    explicit ActionModel(MlpDenoiser<Real> m) : impl_(std::move(m)) {}

    static ActionModel build_dit(const DiTConfig& cfg, uint64_t seed) { return ActionModel(DiT<Real>::build(cfg, seed)); }
    static ActionModel build_mlp(const MLPConfig& cfg, uint64_t seed) {
        return ActionModel(MlpDenoiser<Real>::build(cfg, seed));
    }

    Tensor<Real> forward(const Tensor<Real>& noisy, const Tensor<Real>& cond, const std::vector<int>& steps) const {
        return std::visit([&](const auto& m) { return m.forward(noisy, cond, steps); }, impl_);
    }

    ParamStore<Real>& params() {
        return std::visit([](auto& m) -> ParamStore<Real>& { return m.params(); }, impl_);
    }
    const ParamStore<Real>& params() const {
        return std::visit([](const auto& m) -> const ParamStore<Real>& { return m.params(); }, impl_);
    }

    bool has_null_cond() const {
        return std::visit([](const auto& m) { return m.has_null_cond(); }, impl_);
    }
    const Tensor<Real>& null_cond() const {
        return std::visit([](const auto& m) -> const Tensor<Real>& { return m.null_cond(); }, impl_);
    }

    bool is_dit() const { return std::holds_alternative<DiT<Real>>(impl_); }
    int horizon() const {
        return std::visit([](const auto& m) { return m.config().horizon; }, impl_);
    }
    int action_dim() const {
        return std::visit([](const auto& m) { return m.config().action_dim; }, impl_);
    }
    int cond_dim() const {
        return std::visit([](const auto& m) { return m.config().cond_dim; }, impl_);
    }
    int seq_len() const { return horizon() + 1; }

    nlohmann::json config_json() const {
        nlohmann::json j;
        if (is_dit()) {
            j["backbone"] = "dit";
            j["config"] = std::get<DiT<Real>>(impl_).config();
        } else {
            j["backbone"] = "mlp";
            j["config"] = std::get<MlpDenoiser<Real>>(impl_).config();
        }
        return j;
    }

    static ActionModel from_config_json(const nlohmann::json& j, uint64_t seed) {
        const std::string backbone = j.at("backbone").get<std::string>();
        if (backbone == "dit") return build_dit(j.at("config").get<DiTConfig>(), seed);
        if (backbone == "mlp") return build_mlp(j.at("config").get<MLPConfig>(), seed);
        throw std::invalid_argument("unknown backbone: " + backbone);
    }

private:
    std::variant<DiT<Real>, MlpDenoiser<Real>> impl_;
};

// Named presets. The paper-scale presets keep the VLM-width condition input;
// dit-tiny is the desk-scale configuration used by the toy benchmarks.
inline DiTConfig dit_tiny() { return DiTConfig{3, 128, 4, 15, 7, 256, 256, true}; }
inline DiTConfig dit_small() { return DiTConfig{6, 384, 4, 15, 7, 4096, 256, true}; }
inline DiTConfig dit_base() { return DiTConfig{12, 768, 12, 15, 7, 4096, 256, true}; }
inline DiTConfig dit_large() { return DiTConfig{24, 1024, 16, 15, 7, 4096, 256, true}; }
inline MLPConfig mlp3() { return MLPConfig{3, 256, 15, 7, 4096, 256, true}; }
inline MLPConfig mlp7() { return MLPConfig{7, 1024, 15, 7, 4096, 256, true}; }

}  // namespace dact
