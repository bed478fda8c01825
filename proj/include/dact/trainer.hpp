#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/adam.hpp"
#include "dact/checkpoint.hpp"
#include "dact/cognition.hpp"
#include "dact/dataset.hpp"
#include "dact/diffusion.hpp"
#include "dact/model.hpp"
#include "dact/schedule.hpp"
#include "dact/tensor.hpp"

namespace dact {

struct TrainConfig {
    int steps = 1000;
    int batch_size = 16;
    int diffusion_draws = 8;  // (t, eps) draws per sample per step
    double lr = 1e-4;
    double cfg_dropout = 0.1;
    double obs_noise_std = 0.01;
    int t_train = 100;
    uint64_t seed = 1;
    bool regression = false;
};

// Joint model + encoder trainable state. Parameter tensors are shared
// handles: `params` aliases the tensors living inside model/encoder under
// "model." / "cog." prefixes, so one optimizer step updates both.
template <class Real>
struct TrainState {
    ActionModel<Real> model;
    CognitionEncoder<Real> encoder;
    ParamStore<Real> params;
    AdamState<Real> adam;
    Rng rng;
    int64_t step = 0;
    NoiseSchedule schedule;
    TrainConfig config;

    static TrainState create(ActionModel<Real> model, CognitionEncoder<Real> encoder, const TrainConfig& cfg) {
        TrainState s;
        s.model = std::move(model);
        s.encoder = std::move(encoder);
        s.params.merge("model.", s.model.params());
        s.params.merge("cog.", s.encoder.params());
        s.rng = Rng(mix_seed(cfg.seed, "train"));
        s.schedule = NoiseSchedule::cosine(cfg.t_train);
        s.config = cfg;
        return s;
    }
};

// One optimization step on a batch sampled uniformly over frames.
// Returns the (scalar) loss value.
template <class Real>
double train_step(TrainState<Real>& state, const Dataset& data) {
    const TrainConfig& cfg = state.config;
    const int B = cfg.batch_size;
    const int S = state.model.seq_len();
    const int A = state.model.action_dim();
    const int n_future = state.model.horizon();
    const Normalizer norm = data.normalizer();

    // Cumulative frame counts for uniform frame sampling.
    const int64_t total = data.total_frames();
    if (total == 0) throw TrainingError("train_step: empty dataset");

    std::vector<std::pair<size_t, int64_t>> picks(static_cast<size_t>(B));
    for (auto& [ep_idx, frame_idx] : picks) {
        int64_t flat = static_cast<int64_t>(state.rng.uniform_int(static_cast<uint64_t>(total)));
        size_t e = 0;
        while (flat >= static_cast<int64_t>(data.episodes[e].frames.size())) {
            flat -= static_cast<int64_t>(data.episodes[e].frames.size());
            ++e;
        }
        ep_idx = e;
        frame_idx = flat;
    }

    const int64_t state_dim = static_cast<int64_t>(data.episodes[picks[0].first].frames[0].obs.size());
    auto states = Tensor<Real>::zeros({B, state_dim});
    auto x0 = Tensor<Real>::zeros({B, S, A});
    std::vector<int64_t> task_ids(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        const auto& ep = data.episodes[picks[static_cast<size_t>(b)].first];
        const int64_t t = picks[static_cast<size_t>(b)].second;
        const Window w = window(ep, t, n_future);
        for (int64_t i = 0; i < state_dim; ++i) {
            double v = w.obs_frame->obs[static_cast<size_t>(i)];
            if (cfg.obs_noise_std > 0) v += cfg.obs_noise_std * state.rng.normal();
            states.data()[b * state_dim + i] = static_cast<Real>(v);
        }
        for (int s = 0; s < S; ++s) {
            const ActionVector na = norm.normalize(w.actions[static_cast<size_t>(s)]);
            for (int d = 0; d < A; ++d) x0.data()[(b * S + s) * A + d] = static_cast<Real>(na[d]);
        }
        task_ids[static_cast<size_t>(b)] = ep.task_id;
    }

    auto cond = state.encoder.encode(states, task_ids);

    // Classifier-free condition dropout: replace whole rows with the learned
    // null embedding. Skipped for the regression baseline.
    if (!cfg.regression && cfg.cfg_dropout > 0 && state.model.has_null_cond()) {
        const int64_t dc = cond.dim(1);
        auto mask = Tensor<Real>::zeros({B, dc});
        auto inv = Tensor<Real>::zeros({B, dc});
        for (int b = 0; b < B; ++b) {
            const bool drop = state.rng.bernoulli(cfg.cfg_dropout);
            for (int64_t i = 0; i < dc; ++i) {
                mask.data()[b * dc + i] = drop ? Real(0) : Real(1);
                inv.data()[b * dc + i] = drop ? Real(1) : Real(0);
            }
        }
        auto null_b = add(Tensor<Real>::zeros({B, dc}), state.model.null_cond());
        cond = add(mul(cond, mask), mul(null_b, inv));
    }

    Tensor<Real> loss;
    if (cfg.regression) {
        auto zeros = Tensor<Real>::zeros({B, S, A});
        const std::vector<int> steps(static_cast<size_t>(B), 0);
        loss = mse(state.model.forward(zeros, cond, steps), x0);
    } else {
        loss = training_loss(state.model, x0, cond, state.schedule, state.rng, cfg.diffusion_draws);
    }

    const double loss_val = static_cast<double>(loss.item());
    if (!std::isfinite(loss_val)) throw TrainingError("train_step: non-finite loss at step " + std::to_string(state.step));

    backward(loss);
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    adam_step(state.params, state.adam, adam_cfg);
    state.params.zero_grad();
    state.step += 1;
    return loss_val;
}

// Full loop with a step,loss CSV.
template <class Real>
void train(TrainState<Real>& state, const Dataset& data, const std::string& loss_csv_path = "") {
    std::ofstream csv;
    if (!loss_csv_path.empty()) {
        const bool fresh = state.step == 0;
        csv.open(loss_csv_path, fresh ? std::ios::trunc : std::ios::app);
        if (!csv) throw TrainingError("cannot open loss csv: " + loss_csv_path);
        if (fresh) csv << "step,loss\n";
    }
    while (state.step < state.config.steps) {
        const double loss = train_step(state, data);
        if (csv.is_open()) csv << state.step << "," << loss << "\n";
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

inline constexpr const char* kMetaRecord = "__meta__";

template <class Real>
void save_train_checkpoint(const std::string& path, const TrainState<Real>& state,
                           const nlohmann::json& cognition_cfg, nlohmann::json extra_meta = {}) {
    nlohmann::json meta;
    meta["model"] = state.model.config_json();
    meta["cognition"] = cognition_cfg;
    meta["precision"] = std::is_same_v<Real, float> ? "f32" : "f64";
    meta["step"] = state.step;
    meta["adam_t"] = state.adam.t;
    meta["t_train"] = state.config.t_train;
    meta["regression"] = state.config.regression;
    const auto rs = state.rng.state();
    meta["rng_state"] = {std::to_string(rs[0]), std::to_string(rs[1]), std::to_string(rs[2]), std::to_string(rs[3])};
    if (!extra_meta.is_null()) meta["extra"] = std::move(extra_meta);

    CheckpointWriter w;
    w.add_bytes(kMetaRecord, meta.dump());
    for (const auto& [name, t] : state.params.map()) w.add_tensor(name, t.shape(), t.data());
    for (const auto& [name, m] : state.adam.m)
        w.add_tensor("__adam_m__." + name, {static_cast<int64_t>(m.size())}, m);
    for (const auto& [name, v] : state.adam.v)
        w.add_tensor("__adam_v__." + name, {static_cast<int64_t>(v.size())}, v);
    w.write(path);
}

inline nlohmann::json checkpoint_meta(const std::string& path) {
    auto records = load_checkpoint(path);
    auto it = records.find(kMetaRecord);
    if (it == records.end()) throw CheckpointError("checkpoint has no meta record: " + path);
    return nlohmann::json::parse(std::string(it->second.raw.begin(), it->second.raw.end()));
}

// Rebuilds a full training state (params, optimizer moments, RNG stream)
// from a checkpoint; resuming continues bit-for-bit where training left off.
template <class Real>
TrainState<Real> load_train_checkpoint(const std::string& path, const TrainConfig& cfg) {
    auto records = load_checkpoint(path);
    auto it = records.find(kMetaRecord);
    if (it == records.end()) throw CheckpointError("checkpoint has no meta record: " + path);
    const auto meta = nlohmann::json::parse(std::string(it->second.raw.begin(), it->second.raw.end()));

    const std::string want = std::is_same_v<Real, float> ? "f32" : "f64";
    if (meta.at("precision").get<std::string>() != want)
        throw CheckpointError("checkpoint precision " + meta.at("precision").get<std::string>() +
                              " does not match requested " + want);

    auto model = ActionModel<Real>::from_config_json(meta.at("model"), /*seed=*/0);
    auto encoder = CognitionEncoder<Real>::build(meta.at("cognition").get<CognitionConfig>(), /*seed=*/0);
    auto state = TrainState<Real>::create(std::move(model), std::move(encoder), cfg);

    for (auto& [name, t] : state.params.map()) {
        auto rit = records.find(name);
        if (rit == records.end()) throw CheckpointError("checkpoint missing parameter: " + name);
        if (rit->second.shape != t.shape()) throw CheckpointError("shape mismatch for parameter: " + name);
        t.data() = rit->second.template as<Real>();
    }
    for (const auto& [name, rec] : records) {
        constexpr std::string_view m_prefix = "__adam_m__.", v_prefix = "__adam_v__.";
        if (name.rfind(m_prefix, 0) == 0)
            state.adam.m[name.substr(m_prefix.size())] = rec.template as<Real>();
        else if (name.rfind(v_prefix, 0) == 0)
            state.adam.v[name.substr(v_prefix.size())] = rec.template as<Real>();
    }

    state.step = meta.at("step").get<int64_t>();
    state.adam.t = meta.at("adam_t").get<int64_t>();
    std::array<uint64_t, 4> rs{};
    for (int i = 0; i < 4; ++i) rs[static_cast<size_t>(i)] = std::stoull(meta.at("rng_state")[static_cast<size_t>(i)].get<std::string>());
    state.rng.set_state(rs);
    state.config.t_train = meta.at("t_train").get<int>();
    state.config.regression = meta.at("regression").get<bool>();
    state.schedule = NoiseSchedule::cosine(state.config.t_train);
    return state;
}

}  // namespace dact
