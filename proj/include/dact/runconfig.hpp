#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/cognition.hpp"
#include "dact/ensemble.hpp"
#include "dact/model.hpp"
#include "dact/schedule.hpp"
#include "dact/simulator.hpp"

namespace dact {

// Everything a run needs, resolvable from a JSON config file with
// command-line flag overrides (flags win). Reports embed the resolved form.
struct RunConfig {
    // model
    std::string preset = "dit-tiny";
    int future_steps = 7;
    int t_train = 100;
    std::string precision = "f32";

    // training
    int steps = 1000;
    int batch_size = 16;
    int diffusion_draws = 8;
    double lr = 1e-4;
    double cfg_dropout = 0.1;
    bool regression = false;

    // sampler
    int ddim_steps = 10;
    double cfg_scale = 1.5;
    double eta = 0.0;

    // ensemble
    std::vector<std::string> strategies = {"adaptive"};
    double alpha = 0.1;
    double temporal_decay = 0.1;
    int chunk_len = 2;
    double window_c = 0.2;   // C in K = C / std
    int window_override = 0; // > 0 forces K

    // environment / evaluation
    std::vector<std::string> tasks = {"reach"};
    int episodes = 100;
    std::vector<uint64_t> seeds = {1};
    double obs_noise_std = 0.01;

    // paths
    std::string data_dir;
    std::string out_dir = "out";
    std::string checkpoint;
    std::string resume;

    int threads = 0;  // 0 = auto (hardware, capped by DIFFACT_THREADS)
    std::string norm_mode = "quantile";

    NLOHMANN_DEFINE_TYPE_INTRUSIVE_WITH_DEFAULT(RunConfig, preset, future_steps, t_train, precision, steps,
                                                batch_size, diffusion_draws, lr, cfg_dropout, regression, ddim_steps,
                                                cfg_scale, eta, strategies, alpha, temporal_decay, chunk_len,
                                                window_c, window_override, tasks, episodes, seeds, obs_noise_std,
                                                data_dir, out_dir, checkpoint, resume, threads, norm_mode)

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::invalid_argument("cannot open config file: " + path);
        RunConfig cfg = nlohmann::json::parse(in).get<RunConfig>();
        return cfg;
    }

    int resolved_threads() const {
        int t = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
        if (t < 1) t = 1;
        if (const char* cap = std::getenv("DIFFACT_THREADS")) {
            const int c = std::atoi(cap);
            if (c > 0) t = std::min(t, c);
        }
        return t;
    }

    SamplerConfig sampler_config() const { return SamplerConfig{ddim_steps, cfg_scale, eta}; }

    StrategyConfig strategy_config(const std::string& name, double per_step_std) const {
        StrategyConfig s;
        s.strategy = strategy_from_name(name);
        s.alpha = alpha;
        s.temporal_decay = temporal_decay;
        s.chunk_len = chunk_len;
        s.window = window_override > 0 ? window_override : window_size(per_step_std, window_c);
        return s;
    }

    SimConfig sim_config(Task task) const {
        SimConfig c;
        c.obs_noise_std = obs_noise_std;
        c.horizon = default_horizon(task);
        return c;
    }

    static int default_horizon(Task task) {
        switch (task) {
            case Task::Reach: return 60;
            case Task::PickPlace: return 80;
            case Task::Detour: return 80;
            case Task::Stack: return 100;
        }
        return 100;
    }

    // Builds the action model described by preset/future_steps/regression.
    template <class Real>
    ActionModel<Real> build_model(uint64_t seed) const {
        if (preset == "dit-tiny" || preset == "dit-small" || preset == "dit-base" || preset == "dit-large") {
            DiTConfig c = preset == "dit-tiny"    ? dit_tiny()
                          : preset == "dit-small" ? dit_small()
                          : preset == "dit-base"  ? dit_base()
                                                  : dit_large();
            c.horizon = future_steps;
            c.with_null_cond = !regression && cfg_dropout > 0;
            return ActionModel<Real>::build_dit(c, seed);
        }
        if (preset == "mlp3" || preset == "mlp7") {
            MLPConfig c = preset == "mlp3" ? mlp3() : mlp7();
            c.horizon = future_steps;
            c.with_null_cond = !regression && cfg_dropout > 0;
            return ActionModel<Real>::build_mlp(c, seed);
        }
        if (preset == "mlp3-desk" || preset == "mlp7-desk") {
            MLPConfig c = preset == "mlp3-desk" ? mlp3() : mlp7();
            c.cond_dim = 256;
            c.horizon = future_steps;
            c.with_null_cond = !regression && cfg_dropout > 0;
            return ActionModel<Real>::build_mlp(c, seed);
        }
        throw std::invalid_argument("unknown preset: " + preset);
    }

    template <class Real>
    CognitionEncoder<Real> build_encoder(int cond_dim, uint64_t seed) const {
        CognitionConfig c;
        c.state_dim = kObsDim;
        c.num_tasks = kNumTasks;
        c.out_dim = cond_dim;
        return CognitionEncoder<Real>::build(c, mix_seed(seed, "cognition"));
    }
};

}  // namespace dact
