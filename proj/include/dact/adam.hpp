#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dact/tensor.hpp"

namespace dact {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class Real>
struct AdamState {
    int64_t t = 0;
    std::map<std::string, std::vector<Real>> m;
    std::map<std::string, std::vector<Real>> v;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One Adam update with bias correction over every parameter in the store.
// Parameters without an allocated gradient are treated as zero-grad.
template <class Real>
void adam_step(ParamStore<Real>& params, AdamState<Real>& state, const AdamConfig& cfg) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params.map()) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != p.data().size()) m.assign(p.data().size(), Real(0));
        if (v.size() != p.data().size()) v.assign(p.data().size(), Real(0));
        const bool has_grad = p.has_grad();
        auto& pv = p.data();
        const std::vector<Real>* g = has_grad ? &p.grad() : nullptr;
        for (size_t i = 0; i < pv.size(); ++i) {
            const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
            if (!std::isfinite(gi))
                throw TrainingError("non-finite gradient in parameter '" + name + "'");
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            pv[i] = static_cast<Real>(static_cast<double>(pv[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

}  // namespace dact
