#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/action.hpp"

namespace dact {

enum class Strategy { Chunking, Temporal, Adaptive };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Chunking: return "chunk";
        case Strategy::Temporal: return "temporal";
        case Strategy::Adaptive: return "adaptive";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
    if (s == "chunk" || s == "chunking") return Strategy::Chunking;
    if (s == "temporal") return Strategy::Temporal;
    if (s == "adaptive") return Strategy::Adaptive;
    throw std::invalid_argument("unknown strategy: " + s);
}

struct StrategyConfig {
    Strategy strategy = Strategy::Adaptive;
    double alpha = 0.1;          // adaptive similarity temperature
    double temporal_decay = 0.1; // m in exp(-m k), k=0 newest
    int chunk_len = 2;
    int window = 2;  // K: number of historical predictions kept

    void validate() const {
        if (alpha <= 0.0) throw std::invalid_argument("StrategyConfig: alpha must be > 0");
        if (chunk_len < 1) throw std::invalid_argument("StrategyConfig: chunk_len must be >= 1");
        if (window < 0) throw std::invalid_argument("StrategyConfig: window must be >= 0");
    }
};

// Ensemble window size from the dataset's per-step 6D action std:
// K = max(1, round(C / std)), C the distance constant (0.2 in the paper).
inline int window_size(double per_step_action_std, double c) {
    if (per_step_action_std <= 0.0) throw std::invalid_argument("window_size: std must be > 0");
    const auto k = static_cast<int>(std::llround(c / per_step_action_std));
    return std::max(1, k);
}

// Ring of past predicted sequences keyed by the timestep they were made at.
// Holds at most K+1 entries (K historical plus the current one). An entry
// predicted at t0 covers target steps t0 .. t0+N.
class EnsembleBuffer {
public:
    struct Entry {
        int64_t origin;  // timestep t0 of the observation the prediction used
        ActionSequence seq;
    };

    explicit EnsembleBuffer(int window) : window_(window) {
        if (window < 0) throw std::invalid_argument("EnsembleBuffer: window must be >= 0");
    }

    void push(int64_t origin, ActionSequence seq) {
        if (!entries_.empty() && origin <= entries_.back().origin)
            throw std::invalid_argument("EnsembleBuffer: origins must be strictly increasing");
        entries_.push_back({origin, std::move(seq)});
        while (entries_.size() > static_cast<size_t>(window_) + 1) entries_.pop_front();
    }

    void clear() { entries_.clear(); }
    size_t size() const { return entries_.size(); }
    int window() const { return window_; }
    const std::deque<Entry>& entries() const { return entries_; }

    // Predictions targeting step t as (age k, action) pairs, newest first
    // (k = 0 is the current prediction, made at origin t). Entries that do
    // not cover t are skipped.
    std::vector<std::pair<int, ActionVector>> predictions_for(int64_t t) const {
        std::vector<std::pair<int, ActionVector>> out;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            const int64_t k = t - it->origin;  // age; also the index into the sequence
            if (k < 0 || k >= static_cast<int64_t>(it->seq.size())) continue;
            out.emplace_back(static_cast<int>(k), it->seq[static_cast<size_t>(k)]);
        }
        return out;
    }

private:
    int window_;
    std::deque<Entry> entries_;
};

namespace detail {

inline double cosine6(const ActionVector& a, const ActionVector& b) {
    const auto va = a.continuous6(), vb = b.continuous6();
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < 6; ++i) {
        dot += va[static_cast<size_t>(i)] * vb[static_cast<size_t>(i)];
        na += va[static_cast<size_t>(i)] * va[static_cast<size_t>(i)];
        nb += vb[static_cast<size_t>(i)] * vb[static_cast<size_t>(i)];
    }
    // Zero-norm vectors have no direction; their similarity term is 0.
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Weighted fusion shared by both ensembles: convex combination of the 6D
// parts, weighted gripper vote thresholded at 0.5.
inline ActionVector fuse(const std::vector<std::pair<int, ActionVector>>& preds, const std::vector<double>& weights) {
    double wsum = 0;
    for (double w : weights) wsum += w;
    ActionVector out;
    double gvote = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double w = weights[i] / wsum;
        const auto& a = preds[i].second;
        for (int d = 0; d < 6; ++d) out[d] += w * a[d];
        gvote += w * (a.gripper >= 0.5 ? 1.0 : 0.0);
    }
    out.gripper = gvote >= 0.5 ? 1.0 : 0.0;
    return out;
}

}  // namespace detail

// Adaptive Action Ensemble: w_k = exp(alpha * cos(a_t|o_t, a_t|o_{t-k})),
// normalized to sum to one. preds[0] must be the current prediction.
inline ActionVector aggregate_adaptive(const std::vector<std::pair<int, ActionVector>>& preds, double alpha,
                                       std::vector<double>* weights_out = nullptr) {
    if (preds.empty()) throw std::invalid_argument("aggregate_adaptive: no predictions");
    const ActionVector& current = preds[0].second;
    std::vector<double> w(preds.size());
    for (size_t i = 0; i < preds.size(); ++i)
        w[i] = std::exp(alpha * detail::cosine6(current, preds[i].second));
    auto out = detail::fuse(preds, w);
    if (weights_out) {
        double s = 0;
        for (double x : w) s += x;
        for (double& x : w) x /= s;
        *weights_out = std::move(w);
    }
    return out;
}

// Temporal ensemble (fixed exponential decay): w_k = exp(-m k), k = 0 newest.
inline ActionVector aggregate_temporal(const std::vector<std::pair<int, ActionVector>>& preds, double m,
                                       std::vector<double>* weights_out = nullptr) {
    if (preds.empty()) throw std::invalid_argument("aggregate_temporal: no predictions");
    std::vector<double> w(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) w[i] = std::exp(-m * preds[i].first);
    auto out = detail::fuse(preds, w);
    if (weights_out) {
        double s = 0;
        for (double x : w) s += x;
        for (double& x : w) x /= s;
        *weights_out = std::move(w);
    }
    return out;
}

// Per-step trace sink: one JSON line per executed step.
class TraceSink {
public:
    explicit TraceSink(std::ostream& os) : os_(&os) {}

    void record(int64_t t, Strategy strategy, const std::vector<double>& weights, const ActionVector& raw,
                const ActionVector& executed) {
        nlohmann::json j;
        j["t"] = t;
        j["strategy"] = strategy_name(strategy);
        j["weights"] = weights;
        j["raw_prediction"] = raw.to_array();
        j["executed_action"] = executed.to_array();
        (*os_) << j.dump() << "\n";
    }

private:
    std::ostream* os_;
};

// Drives one rollout's execution regime. The predictor is only invoked when
// the strategy needs a fresh model prediction:
//   Chunking  - every chunk_len steps, executing the chunk in between;
//   Temporal / Adaptive - every step, fusing against the buffer.
class PolicyStepper {
public:
    explicit PolicyStepper(const StrategyConfig& cfg) : cfg_(cfg), buffer_(cfg.window) { cfg_.validate(); }

    using Predictor = std::function<ActionSequence()>;

    ActionVector step(int64_t t, const Predictor& predict, TraceSink* trace = nullptr) {
        switch (cfg_.strategy) {
            case Strategy::Chunking: return step_chunking(t, predict, trace);
            case Strategy::Temporal:
            case Strategy::Adaptive: return step_ensemble(t, predict, trace);
        }
        throw std::logic_error("unreachable");
    }

    void reset() {
        buffer_.clear();
        chunk_.reset();
    }

    const EnsembleBuffer& buffer() const { return buffer_; }

private:
    ActionVector step_chunking(int64_t t, const Predictor& predict, TraceSink* trace) {
        if (!chunk_ || chunk_offset_ >= cfg_.chunk_len || chunk_offset_ >= static_cast<int>(chunk_->size())) {
            chunk_ = predict();
            chunk_offset_ = 0;
        }
        const ActionVector a = (*chunk_)[static_cast<size_t>(chunk_offset_++)];
        if (trace) trace->record(t, cfg_.strategy, {1.0}, a, a);
        return a;
    }

    ActionVector step_ensemble(int64_t t, const Predictor& predict, TraceSink* trace) {
        buffer_.push(t, predict());
        const auto preds = buffer_.predictions_for(t);
        std::vector<double> weights;
        const ActionVector out = cfg_.strategy == Strategy::Adaptive
                                     ? aggregate_adaptive(preds, cfg_.alpha, &weights)
                                     : aggregate_temporal(preds, cfg_.temporal_decay, &weights);
        if (trace) trace->record(t, cfg_.strategy, weights, preds[0].second, out);
        return out;
    }

    StrategyConfig cfg_;
    EnsembleBuffer buffer_;
    std::optional<ActionSequence> chunk_;
    int chunk_offset_ = 0;
};

}  // namespace dact
