#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/model.hpp"
#include "dact/tensor.hpp"

namespace dact {

struct CognitionConfig {
    int state_dim = 19;
    int num_tasks = 4;
    int task_embed_dim = 32;
    int hidden_dim = 256;
    int out_dim = 256;  // must equal the action model's cond_dim

    void validate() const {
        if (state_dim < 1 || num_tasks < 1 || task_embed_dim < 1 || hidden_dim < 1 || out_dim < 1)
            throw std::invalid_argument("CognitionConfig: bad sizes");
    }

    NLOHMANN_DEFINE_TYPE_INTRUSIVE(CognitionConfig, state_dim, num_tasks, task_embed_dim, hidden_dim, out_dim)
};

// Desk-scale stand-in for the VLM: a task-embedding table concatenated with
// the raw low-dimensional state, followed by a 2-layer GELU MLP. Trained
// end-to-end with the action module.
template <class Real>
class CognitionEncoder {
public:
    static CognitionEncoder build(const CognitionConfig& cfg, uint64_t seed) {
        cfg.validate();
        CognitionEncoder e;
        e.cfg_ = cfg;
        e.params_.add("task_embed",
                      init_trunc_normal<Real>({cfg.num_tasks, cfg.task_embed_dim}, seed, "cog.task_embed"));
        detail::add_linear(e.params_, "fc1", cfg.state_dim + cfg.task_embed_dim, cfg.hidden_dim, seed);
        detail::add_linear(e.params_, "fc2", cfg.hidden_dim, cfg.out_dim, seed);
        return e;
    }

    // states: [B, state_dim]; task_ids: per-row task index. Returns [B, out_dim].
    Tensor<Real> encode(const Tensor<Real>& states, const std::vector<int64_t>& task_ids) const {
        if (states.ndim() != 2 || states.dim(1) != cfg_.state_dim)
            shape_error("CognitionEncoder::encode: states must be [B," + std::to_string(cfg_.state_dim) + "], got " +
                        shape_str(states.shape()));
        if (static_cast<int64_t>(task_ids.size()) != states.dim(0))
            shape_error("CognitionEncoder::encode: task_ids length != batch");
        for (int64_t id : task_ids)
            if (id < 0 || id >= cfg_.num_tasks)
                throw std::invalid_argument("unknown task_id " + std::to_string(id));
        auto emb = embedding(params_.at("task_embed"), task_ids);
        auto x = concat<Real>({states, emb}, 1);
        return detail::linear(params_, "fc2", gelu(detail::linear(params_, "fc1", x)));
    }

    const CognitionConfig& config() const { return cfg_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }

private:
    CognitionConfig cfg_;
    ParamStore<Real> params_;
};

}  // namespace dact
