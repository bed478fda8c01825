#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/dataset.hpp"
#include "dact/policy.hpp"
#include "dact/runconfig.hpp"
#include "dact/trainer.hpp"

namespace dact {

// ---------------------------------------------------------------------------
// dataset generation from the scripted experts
// ---------------------------------------------------------------------------

// Records one expert episode; returns an empty frame list if the expert
// failed to solve the instance within the horizon (flagged, not stored).
inline Episode record_expert_episode(Task task, uint64_t seed, uint64_t mode_seed, const SimConfig& cfg) {
    Episode ep;
    ep.task_id = static_cast<int>(task);
    ep.source_id = std::string("expert/") + task_name(task) + "/" + std::to_string(seed);

    EnvState s = reset(task, seed, cfg);
    for (int t = 0; t < cfg.horizon; ++t) {
        const ActionVector a = scripted_expert(task, s, mode_seed, cfg);
        ep.frames.push_back({observe(s), a, t});
        s = step(s, a, cfg);
        if (success(s, cfg)) return ep;
    }
    ep.frames.clear();  // flagged: expert did not finish
    return ep;
}

struct GenerateResult {
    Dataset dataset;
    int flagged = 0;  // expert failures, excluded from the dataset
};

inline GenerateResult generate_dataset(const RunConfig& cfg) {
    GenerateResult out;
    const uint64_t seed = cfg.seeds.empty() ? 1 : cfg.seeds[0];
    for (const auto& tname : cfg.tasks) {
        const Task task = task_from_name(tname);
        const SimConfig sim = cfg.sim_config(task);
        for (int i = 0; i < cfg.episodes; ++i) {
            const uint64_t ep_seed = mix_seed(seed, task_name(task) + std::to_string(i));
            // Alternate expert modes so multimodal tasks see both branches.
            Episode ep = record_expert_episode(task, ep_seed, static_cast<uint64_t>(i), sim);
            if (ep.frames.empty()) {
                out.flagged += 1;
                continue;
            }
            out.dataset.episodes.push_back(std::move(ep));
        }
    }
    if (out.dataset.episodes.empty()) throw DataError("generate_dataset: no successful expert episodes");
    out.dataset.stats = compute_stats(out.dataset.episodes);
    out.dataset.norm_mode = norm_mode_from_name(cfg.norm_mode);
    out.dataset.manifest["generator"] = {{"seed", seed},
                                         {"episodes_per_task", cfg.episodes},
                                         {"tasks", cfg.tasks},
                                         {"obs_noise_std", cfg.obs_noise_std},
                                         {"flagged_episodes", out.flagged}};
    return out;
}

// Trajectory trace CSV: step, ee pose (6), gripper, object slots (9), action (7).
inline void write_trajectory_csv(const Episode& ep, std::ostream& os) {
    os << "step,ee_x,ee_y,ee_z,ee_roll,ee_pitch,ee_yaw,gripper,"
          "obj0_x,obj0_y,obj0_z,obj1_x,obj1_y,obj1_z,obj2_x,obj2_y,obj2_z,"
          "a_dx,a_dy,a_dz,a_droll,a_dpitch,a_dyaw,a_g\n";
    for (const auto& f : ep.frames) {
        os << f.t;
        for (int i = 0; i < 16; ++i) os << "," << f.obs[static_cast<size_t>(i)];
        for (int d = 0; d < 7; ++d) os << "," << f.action[d];
        os << "\n";
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

template <class Real>
TrainState<Real> make_train_state(const RunConfig& cfg, uint64_t seed) {
    TrainConfig tc;
    tc.steps = cfg.steps;
    tc.batch_size = cfg.batch_size;
    tc.diffusion_draws = cfg.diffusion_draws;
    tc.lr = cfg.lr;
    tc.cfg_dropout = cfg.cfg_dropout;
    tc.obs_noise_std = cfg.obs_noise_std;
    tc.t_train = cfg.t_train;
    tc.seed = seed;
    tc.regression = cfg.regression;

    auto model = cfg.build_model<Real>(seed);
    auto encoder = cfg.build_encoder<Real>(model.cond_dim(), seed);
    return TrainState<Real>::create(std::move(model), std::move(encoder), tc);
}

// Train (or resume) per the config; writes loss.csv and checkpoint.dact
// under out_dir when it is non-empty.
template <class Real>
TrainState<Real> train_model(const RunConfig& cfg, const Dataset& data, const std::string& out_dir) {
    const uint64_t seed = cfg.seeds.empty() ? 1 : cfg.seeds[0];

    TrainConfig tc;
    tc.steps = cfg.steps;
    tc.batch_size = cfg.batch_size;
    tc.diffusion_draws = cfg.diffusion_draws;
    tc.lr = cfg.lr;
    tc.cfg_dropout = cfg.cfg_dropout;
    tc.obs_noise_std = cfg.obs_noise_std;
    tc.t_train = cfg.t_train;
    tc.seed = seed;
    tc.regression = cfg.regression;

    TrainState<Real> state = cfg.resume.empty() ? make_train_state<Real>(cfg, seed)
                                                : load_train_checkpoint<Real>(cfg.resume, tc);

    std::string loss_csv, ckpt;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        loss_csv = (std::filesystem::path(out_dir) / "loss.csv").string();
        ckpt = (std::filesystem::path(out_dir) / "checkpoint.dact").string();
    }
    train(state, data, loss_csv);
    if (!ckpt.empty())
        save_train_checkpoint(ckpt, state, nlohmann::json(state.encoder.config()),
                              nlohmann::json{{"run_config", cfg}});
    return state;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

template <class Real>
std::shared_ptr<const PolicyContext<Real>> make_policy_context(const TrainState<Real>& state, const Dataset& data,
                                                               const RunConfig& cfg,
                                                               const std::string& strategy_name) {
    auto ctx = std::make_shared<PolicyContext<Real>>();
    ctx->model = state.model;      // shares parameter handles (read-only here)
    ctx->encoder = state.encoder;
    ctx->normalizer = data.normalizer();
    ctx->schedule = NoiseSchedule::cosine(state.config.t_train);
    ctx->sampler = cfg.sampler_config();
    ctx->strategy = cfg.strategy_config(strategy_name, data.stats.six_d_std);
    ctx->regression = state.config.regression;
    return ctx;
}

// Loads a checkpoint into inference-only state (no optimizer history needed).
template <class Real>
TrainState<Real> load_for_eval(const std::string& checkpoint_path) {
    TrainConfig tc;
    return load_train_checkpoint<Real>(checkpoint_path, tc);
}

struct StrategyEval {
    std::string strategy;
    EvalSummary overall;
    std::map<std::string, EvalSummary> per_task;
};

template <class Real>
StrategyEval evaluate_strategy(const TrainState<Real>& state, const Dataset& data, const RunConfig& cfg,
                               const std::string& strategy_name) {
    StrategyEval out;
    out.strategy = strategy_name;
    std::vector<EpisodeResult> all;
    for (const auto& tname : cfg.tasks) {
        const Task task = task_from_name(tname);
        const SimConfig sim = cfg.sim_config(task);
        std::vector<EpisodeResult> task_results;
        auto ctx = make_policy_context(state, data, cfg, strategy_name);
        for (uint64_t seed : cfg.seeds) {
            const auto factory = [&ctx](uint64_t ep_seed) { return EpisodePolicy<Real>(ctx, ep_seed); };
            auto results = run_episodes(factory, task, cfg.episodes, seed, sim, cfg.resolved_threads());
            task_results.insert(task_results.end(), results.begin(), results.end());
        }
        out.per_task[tname] = summarize(task_results);
        all.insert(all.end(), task_results.begin(), task_results.end());
    }
    out.overall = summarize(all);
    return out;
}

inline nlohmann::json summary_json(const EvalSummary& s) {
    return {{"success_rate_pct", 100.0 * s.success_rate},
            {"stderr_pct", 100.0 * s.stderr_success()},
            {"mean_jerk", s.mean_jerk},
            {"mean_steps", s.mean_steps},
            {"episodes", s.episodes}};
}

template <class Real>
nlohmann::json eval_report(const TrainState<Real>& state, const Dataset& data, const RunConfig& cfg,
                           const std::string& build_id) {
    nlohmann::json report;
    report["build_id"] = build_id;
    report["config"] = cfg;
    report["checkpoint_step"] = state.step;
    nlohmann::json strategies = nlohmann::json::object();
    for (const auto& sname : cfg.strategies) {
        const StrategyEval ev = evaluate_strategy(state, data, cfg, sname);
        nlohmann::json js;
        js["overall"] = summary_json(ev.overall);
        for (const auto& [tname, summary] : ev.per_task) js["per_task"][tname] = summary_json(summary);
        strategies[sname] = js;
    }
    report["strategies"] = strategies;
    return report;
}

}  // namespace dact
