#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "dact/action.hpp"
#include "dact/cognition.hpp"
#include "dact/dataset.hpp"
#include "dact/diffusion.hpp"
#include "dact/ensemble.hpp"
#include "dact/model.hpp"
#include "dact/schedule.hpp"
#include "dact/simulator.hpp"
#include "dact/tensor.hpp"

namespace dact {

// Immutable inference bundle shared across rollouts; parameters are
// read-only once built, so one context can serve many threads.
template <class Real>
struct PolicyContext {
    ActionModel<Real> model;
    CognitionEncoder<Real> encoder;
    Normalizer normalizer;
    NoiseSchedule schedule;
    SamplerConfig sampler;
    StrategyConfig strategy;
    bool regression = false;  // MSE baseline: one direct forward, no diffusion
};

// Per-episode actor. Predictions are produced and fused in normalized
// [-1,1] space (gripper held in {0,1} for the vote) and denormalized only
// for execution.
template <class Real>
class EpisodePolicy {
public:
    EpisodePolicy(std::shared_ptr<const PolicyContext<Real>> ctx, uint64_t seed, TraceSink* trace = nullptr)
        : ctx_(std::move(ctx)), stepper_(ctx_->strategy), rng_(mix_seed(seed, "policy.sample")), trace_(trace) {}

    ActionVector operator()(const EnvState& state, const std::vector<double>& obs, int64_t t) {
        const int64_t task_id = static_cast<int64_t>(state.task);
        const auto predictor = [&]() { return predict_sequence(obs, task_id); };
        const ActionVector fused = stepper_.step(t, predictor, trace_);
        return ctx_->normalizer.denormalize(fused);
    }

    int64_t model_calls() const { return model_calls_; }

private:
    ActionSequence predict_sequence(const std::vector<double>& obs, int64_t task_id) {
        ++model_calls_;
        NoGradGuard ng;
        auto states = Tensor<Real>::zeros({1, static_cast<int64_t>(obs.size())});
        for (size_t i = 0; i < obs.size(); ++i) states.data()[static_cast<int64_t>(i)] = static_cast<Real>(obs[i]);
        auto cond = ctx_->encoder.encode(states, {task_id});

        std::vector<double> flat;
        if (ctx_->regression) {
            const int64_t S = ctx_->model.seq_len(), A = ctx_->model.action_dim();
            auto zeros = Tensor<Real>::zeros({1, S, A});
            auto pred = ctx_->model.forward(zeros, cond, {0});
            flat.assign(pred.data().begin(), pred.data().end());
            for (auto& v : flat) v = std::min(1.0, std::max(-1.0, v));
        } else {
            std::vector<Real> cond_row(cond.data().begin(), cond.data().end());
            flat = ddim_sample(ctx_->model, cond_row, ctx_->schedule, ctx_->sampler, rng_);
        }

        auto seq = sequence_from_flat(flat);
        // Binarize the gripper channel for the weighted-vote convention.
        for (auto& a : seq) a.gripper = a.gripper > 0.0 ? 1.0 : 0.0;
        return seq;
    }

    std::shared_ptr<const PolicyContext<Real>> ctx_;
    PolicyStepper stepper_;
    Rng rng_;
    TraceSink* trace_;
    int64_t model_calls_ = 0;
};

}  // namespace dact
