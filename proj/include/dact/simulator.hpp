#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dact/action.hpp"
#include "dact/rng.hpp"

namespace dact {

enum class Task : int { Reach = 0, PickPlace = 1, Detour = 2, Stack = 3 };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::Reach: return "reach";
        case Task::PickPlace: return "pick_place";
        case Task::Detour: return "detour";
        case Task::Stack: return "stack";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "reach") return Task::Reach;
    if (s == "pick_place") return Task::PickPlace;
    if (s == "detour") return Task::Detour;
    if (s == "stack") return Task::Stack;
    throw std::invalid_argument("unknown task: " + s);
}

constexpr int kNumTasks = 4;

struct TaskSpec {
    Task id = Task::Reach;
    int64_t task_id() const { return static_cast<int64_t>(id); }
};

struct SimConfig {
    double grasp_radius = 0.05;
    double max_delta = 0.1;       // per-step per-component clip, translation and rotation
    double goal_tol = 0.05;
    double obs_noise_std = 0.01;  // observation augmentation, not physics
    int horizon = 100;
    // Obstacle wall for the detour task: the plane x = wall_x, blocked for
    // |y| <= wall_half_width.
    double wall_x = 0.0;
    double wall_half_width = 0.2;
    double stack_offset = 0.08;   // vertical separation of stacked objects
};

struct ObjectState {
    std::array<double, 3> pos{};
    bool held = false;
};

struct EnvState {
    Task task = Task::Reach;
    std::array<double, 6> ee{};         // x, y, z, roll, pitch, yaw
    double gripper = 0;                 // {0,1}
    std::vector<ObjectState> objects;   // task-dependent count (<= 3)
    std::array<double, 3> target{};
    int step_count = 0;
    bool wall_hit = false;

    int held_index() const {
        for (size_t i = 0; i < objects.size(); ++i)
            if (objects[i].held) return static_cast<int>(i);
        return -1;
    }
};

struct EpisodeResult {
    bool success = false;
    int steps = 0;
    double jerk = 0;  // mean L2 of second differences of the executed translations
};

namespace detail {

inline double dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline std::array<double, 3> ee_pos(const EnvState& s) { return {s.ee[0], s.ee[1], s.ee[2]}; }

inline double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace detail

// Fixed-width observation: ee pose (6), gripper (1), three object slots (9),
// target (3). Absent objects read as zeros.
constexpr int kObsDim = 19;

inline std::vector<double> observe(const EnvState& s) {
    std::vector<double> obs(kObsDim, 0.0);
    for (int i = 0; i < 6; ++i) obs[static_cast<size_t>(i)] = s.ee[static_cast<size_t>(i)];
    obs[6] = s.gripper;
    for (size_t k = 0; k < s.objects.size() && k < 3; ++k)
        for (int i = 0; i < 3; ++i) obs[7 + 3 * k + static_cast<size_t>(i)] = s.objects[k].pos[static_cast<size_t>(i)];
    for (int i = 0; i < 3; ++i) obs[16 + static_cast<size_t>(i)] = s.target[static_cast<size_t>(i)];
    return obs;
}

inline std::vector<double> observe_noisy(const EnvState& s, double noise_std, Rng& rng) {
    auto obs = observe(s);
    if (noise_std > 0)
        for (auto& v : obs) v += noise_std * rng.normal();
    return obs;
}

// Pure kinematic transition. Deltas are clipped per component, positions are
// clamped to the workspace, a closing gripper grabs the nearest object within
// the grasp radius, and a held object tracks the end effector exactly.
inline EnvState step(const EnvState& state, const ActionVector& action, const SimConfig& cfg) {
    EnvState s = state;
    const double d = cfg.max_delta;
    std::array<double, 6> delta = {action.dx, action.dy, action.dz, action.droll, action.dpitch, action.dyaw};
    for (auto& v : delta) v = detail::clampd(v, -d, d);
    for (int i = 0; i < 3; ++i) s.ee[static_cast<size_t>(i)] = detail::clampd(s.ee[static_cast<size_t>(i)] + delta[static_cast<size_t>(i)], -1.0, 1.0);
    for (int i = 3; i < 6; ++i) s.ee[static_cast<size_t>(i)] += delta[static_cast<size_t>(i)];

    const bool close = action.gripper >= 0.5;
    const bool was_closed = s.gripper >= 0.5;
    s.gripper = close ? 1.0 : 0.0;

    if (close && !was_closed) {
        // Grab the nearest object within reach.
        int best = -1;
        double best_d = cfg.grasp_radius;
        for (size_t i = 0; i < s.objects.size(); ++i) {
            const double di = detail::dist3(s.objects[i].pos, detail::ee_pos(s));
            if (di <= best_d) {
                best_d = di;
                best = static_cast<int>(i);
            }
        }
        if (best >= 0) s.objects[static_cast<size_t>(best)].held = true;
    } else if (!close) {
        for (auto& o : s.objects) o.held = false;
    }
    for (auto& o : s.objects)
        if (o.held) o.pos = detail::ee_pos(s);

    if (s.task == Task::Detour) {
        // Crossing the wall plane inside the blocked band counts as a hit.
        const double x0 = state.ee[0], x1 = s.ee[0];
        if ((x0 - cfg.wall_x) * (x1 - cfg.wall_x) <= 0.0 && x0 != x1) {
            const double f = (cfg.wall_x - x0) / (x1 - x0);
            const double y_cross = state.ee[1] + f * (s.ee[1] - state.ee[1]);
            if (std::abs(y_cross) <= cfg.wall_half_width) s.wall_hit = true;
        }
    }

    s.step_count += 1;
    return s;
}

inline bool success(const EnvState& s, const SimConfig& cfg) {
    switch (s.task) {
        case Task::Reach:
            return detail::dist3(detail::ee_pos(s), s.target) < cfg.goal_tol;
        case Task::PickPlace:
            return !s.objects.empty() && !s.objects[0].held &&
                   detail::dist3(s.objects[0].pos, s.target) < cfg.goal_tol;
        case Task::Detour:
            return !s.wall_hit && detail::dist3(detail::ee_pos(s), s.target) < cfg.goal_tol;
        case Task::Stack: {
            if (s.objects.size() < 3) return false;
            const auto& base = s.objects[0].pos;
            const auto& a = s.objects[1];
            const auto& b = s.objects[2];
            const std::array<double, 3> slot_a = {base[0], base[1], base[2] + cfg.stack_offset};
            const std::array<double, 3> slot_b = {base[0], base[1], base[2] + 2 * cfg.stack_offset};
            return !a.held && !b.held && detail::dist3(a.pos, slot_a) < cfg.goal_tol &&
                   detail::dist3(b.pos, slot_b) < cfg.goal_tol;
        }
    }
    return false;
}

// Seeded initial state. Object layouts keep a minimum separation so the
// scripted experts stay well-posed.
inline EnvState reset(Task task, uint64_t seed, const SimConfig& cfg) {
    Rng rng(mix_seed(seed, "env.reset"));
    const auto uni = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };

    EnvState s;
    s.task = task;
    s.ee = {uni(-0.2, 0.2), uni(-0.2, 0.2), uni(0.2, 0.4), 0, 0, 0};
    s.gripper = 0;

    switch (task) {
        case Task::Reach: {
            s.target = {uni(-0.45, 0.45), uni(-0.45, 0.45), uni(0.1, 0.5)};
            break;
        }
        case Task::PickPlace: {
            ObjectState obj;
            obj.pos = {uni(-0.45, 0.45), uni(-0.45, 0.45), 0.05};
            s.objects.push_back(obj);
            do {
                s.target = {uni(-0.45, 0.45), uni(-0.45, 0.45), 0.05};
            } while (detail::dist3(s.target, obj.pos) < 0.3);
            break;
        }
        case Task::Detour: {
            s.ee = {-0.5, uni(-0.05, 0.05), uni(0.15, 0.25), 0, 0, 0};
            s.target = {0.5, uni(-0.05, 0.05), 0.2};
            break;
        }
        case Task::Stack: {
            // objects[0] = base plate, objects[1] = block A, objects[2] = block B
            for (int i = 0; i < 3; ++i) {
                ObjectState obj;
                bool ok = false;
                while (!ok) {
                    obj.pos = {uni(-0.4, 0.4), uni(-0.4, 0.4), 0.05};
                    ok = true;
                    for (int j = 0; j < i; ++j)
                        ok = ok && detail::dist3(obj.pos, s.objects[static_cast<size_t>(j)].pos) >= 0.3;
                }
                s.objects.push_back(obj);
            }
            s.target = s.objects[0].pos;
            break;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// scripted experts
// ---------------------------------------------------------------------------

namespace detail {

// Move toward `goal` with step size capped below the env clip; emits the
// gripper state to hold.
inline ActionVector move_toward(const EnvState& s, const std::array<double, 3>& goal, double gripper,
                                double speed = 0.08) {
    ActionVector a;
    const auto p = ee_pos(s);
    const double d = dist3(p, goal);
    if (d > 1e-12) {
        const double scale = std::min(speed, d) / d;
        a.dx = (goal[0] - p[0]) * scale;
        a.dy = (goal[1] - p[1]) * scale;
        a.dz = (goal[2] - p[2]) * scale;
    }
    a.gripper = gripper;
    return a;
}

inline bool near(const EnvState& s, const std::array<double, 3>& goal, double tol) {
    return dist3(ee_pos(s), goal) < tol;
}

// One pick-and-place leg: fetch object `idx` and hold it at `slot`, then
// release. Returns the action and whether the leg is complete.
inline std::pair<ActionVector, bool> pick_leg(const EnvState& s, size_t idx, const std::array<double, 3>& slot,
                                              const SimConfig& cfg) {
    const auto& obj = s.objects[idx];
    const bool placed = !obj.held && dist3(obj.pos, slot) < cfg.goal_tol * 0.6;
    if (placed) return {ActionVector{}, true};
    if (obj.held) {
        if (near(s, slot, 0.02)) {
            ActionVector open;
            open.gripper = 0.0;  // release at the slot
            return {open, false};
        }
        return {move_toward(s, slot, 1.0), false};
    }
    if (near(s, obj.pos, cfg.grasp_radius * 0.6)) {
        ActionVector close;
        close.gripper = 1.0;
        return {close, false};
    }
    return {move_toward(s, obj.pos, 0.0), false};
}

}  // namespace detail

// Deterministic scripted policy for (task, state, mode_seed). mode_seed only
// matters for the detour task, where its low bit picks the left or right path
// around the wall.
inline ActionVector scripted_expert(Task task, const EnvState& s, uint64_t mode_seed, const SimConfig& cfg) {
    switch (task) {
        case Task::Reach:
            if (detail::near(s, s.target, cfg.goal_tol * 0.5)) return ActionVector{};
            return detail::move_toward(s, s.target, 0.0);
        case Task::PickPlace: {
            const std::array<double, 3> slot = {s.target[0], s.target[1], s.target[2]};
            return detail::pick_leg(s, 0, slot, cfg).first;
        }
        case Task::Detour: {
            const double side = (mode_seed & 1) ? 1.0 : -1.0;
            const std::array<double, 3> waypoint = {cfg.wall_x, side * (cfg.wall_half_width + 0.15), s.target[2]};
            // Head to the waypoint until past the wall, then to the target.
            if (s.ee[0] < cfg.wall_x - 1e-9)
                return detail::move_toward(s, waypoint, 0.0);
            if (detail::near(s, s.target, cfg.goal_tol * 0.5)) return ActionVector{};
            return detail::move_toward(s, s.target, 0.0);
        }
        case Task::Stack: {
            const auto& base = s.objects[0].pos;
            const std::array<double, 3> slot_a = {base[0], base[1], base[2] + cfg.stack_offset};
            const std::array<double, 3> slot_b = {base[0], base[1], base[2] + 2 * cfg.stack_offset};
            auto [act_a, done_a] = detail::pick_leg(s, 1, slot_a, cfg);
            if (!done_a) return act_a;
            auto [act_b, done_b] = detail::pick_leg(s, 2, slot_b, cfg);
            if (!done_b) return act_b;
            return ActionVector{};
        }
    }
    return ActionVector{};
}

// ---------------------------------------------------------------------------
// rollout / evaluation
// ---------------------------------------------------------------------------

struct EvalSummary {
    double success_rate = 0;  // fraction in [0,1]
    double mean_jerk = 0;
    double mean_steps = 0;
    int episodes = 0;

    double stderr_success() const {
        if (episodes < 2) return 0.0;
        const double p = success_rate;
        return std::sqrt(p * (1.0 - p) / episodes);
    }
};

inline EvalSummary summarize(const std::vector<EpisodeResult>& results) {
    EvalSummary s;
    s.episodes = static_cast<int>(results.size());
    if (results.empty()) return s;
    double succ = 0, jerk = 0, steps = 0;
    for (const auto& r : results) {
        succ += r.success ? 1.0 : 0.0;
        jerk += r.jerk;
        steps += r.steps;
    }
    s.success_rate = succ / s.episodes;
    s.mean_jerk = jerk / s.episodes;
    s.mean_steps = steps / s.episodes;
    return s;
}

// A policy is a stateful per-episode actor: policy(state, obs, t) -> action.
// Learned policies should only read the (noisy) observation; scripted
// experts read the true state.
struct RolloutHooks {
    std::function<void(const EnvState&, const ActionVector&)> on_step;  // pre-step state + chosen action
};

template <class Policy>
EpisodeResult rollout(Policy&& policy, Task task, uint64_t seed, const SimConfig& cfg,
                      const RolloutHooks& hooks = {}) {
    EnvState s = reset(task, seed, cfg);
    Rng obs_rng(mix_seed(seed, "env.obs_noise"));
    std::vector<std::array<double, 3>> translations;  // executed per-step ee displacement

    EpisodeResult result;
    for (int t = 0; t < cfg.horizon; ++t) {
        const auto obs = observe_noisy(s, cfg.obs_noise_std, obs_rng);
        const ActionVector a = policy(s, obs, t);
        if (hooks.on_step) hooks.on_step(s, a);
        const EnvState before = s;
        s = step(s, a, cfg);
        translations.push_back({s.ee[0] - before.ee[0], s.ee[1] - before.ee[1], s.ee[2] - before.ee[2]});
        result.steps = s.step_count;
        if (success(s, cfg)) {
            result.success = true;
            break;
        }
    }

    double jerk_sum = 0;
    int jerk_n = 0;
    for (size_t i = 2; i < translations.size(); ++i) {
        double sq = 0;
        for (int d = 0; d < 3; ++d) {
            const double v = translations[i][static_cast<size_t>(d)] - 2 * translations[i - 1][static_cast<size_t>(d)] +
                             translations[i - 2][static_cast<size_t>(d)];
            sq += v * v;
        }
        jerk_sum += std::sqrt(sq);
        ++jerk_n;
    }
    result.jerk = jerk_n > 0 ? jerk_sum / jerk_n : 0.0;
    return result;
}

// Seeded multi-episode evaluation. Episodes run on a small worker pool but
// results are reduced in episode-index order, so the summary is deterministic
// regardless of scheduling. The factory must hand out an independent policy
// instance per episode.
template <class PolicyFactory>
std::vector<EpisodeResult> run_episodes(PolicyFactory&& make_policy, Task task, int num_episodes, uint64_t seed,
                                        const SimConfig& cfg, int threads = 1) {
    std::vector<EpisodeResult> results(static_cast<size_t>(num_episodes));
    std::atomic<int> next{0};
    const auto worker = [&] {
        while (true) {
            const int i = next.fetch_add(1);
            if (i >= num_episodes) return;
            const uint64_t ep_seed = mix_seed(seed, static_cast<uint64_t>(i) + 1);
            auto policy = make_policy(ep_seed);
            results[static_cast<size_t>(i)] = rollout(policy, task, ep_seed, cfg);
        }
    };
    threads = std::max(1, std::min(threads, num_episodes));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < threads; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return results;
}

template <class PolicyFactory>
EvalSummary evaluate(PolicyFactory&& make_policy, Task task, int num_episodes, uint64_t seed, const SimConfig& cfg,
                     int threads = 1) {
    return summarize(run_episodes(make_policy, task, num_episodes, seed, cfg, threads));
}

}  // namespace dact
