#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace dact {

// Squared-cosine beta schedule (improved-DDPM family).
// alpha_bars[t] = f((t+1)/T) / f(0), f(u) = cos^2((u + s)/(1 + s) * pi/2).
struct NoiseSchedule {
    int t_train = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule cosine(int t_train, double s = 0.008) {
        if (t_train < 1) throw std::invalid_argument("NoiseSchedule: t_train must be >= 1");
        NoiseSchedule sched;
        sched.t_train = t_train;
        sched.betas.resize(static_cast<size_t>(t_train));
        sched.alphas.resize(static_cast<size_t>(t_train));
        sched.alpha_bars.resize(static_cast<size_t>(t_train));
        const auto f = [s](double u) {
            const double c = std::cos((u + s) / (1.0 + s) * M_PI / 2.0);
            return c * c;
        };
        const double f0 = f(0.0);
        double prev_bar = 1.0;
        for (int t = 0; t < t_train; ++t) {
            const double bar = f(static_cast<double>(t + 1) / t_train) / f0;
            double beta = 1.0 - bar / prev_bar;
            beta = std::min(std::max(beta, 1e-8), 0.999);
            sched.betas[static_cast<size_t>(t)] = beta;
            sched.alphas[static_cast<size_t>(t)] = 1.0 - beta;
            // Recompose so the invariants hold exactly even where beta clipped.
            prev_bar *= 1.0 - beta;
            sched.alpha_bars[static_cast<size_t>(t)] = prev_bar;
        }
        return sched;
    }

    double alpha_bar(int t) const { return alpha_bars[static_cast<size_t>(check(t))]; }

    int check(int t) const {
        if (t < 0 || t >= t_train)
            throw std::invalid_argument("diffusion step " + std::to_string(t) + " out of [0, " +
                                        std::to_string(t_train) + ")");
        return t;
    }
};

struct SamplerConfig {
    int num_ddim_steps = 10;
    double cfg_scale = 1.5;
    double eta = 0.0;  // 0 = deterministic DDIM

    void validate(int t_train) const {
        if (num_ddim_steps < 1 || num_ddim_steps > t_train)
            throw std::invalid_argument("num_ddim_steps must be in [1, t_train]");
        if (cfg_scale < 0.0) throw std::invalid_argument("cfg_scale must be >= 0");
    }
};

// The num_ddim_steps timesteps used by the sampler, descending.
// Evenly spaced: for T=100, S=10 -> {99, 89, ..., 9}.
inline std::vector<int> ddim_timesteps(int t_train, int num_steps) {
    std::vector<int> taus(static_cast<size_t>(num_steps));
    for (int j = 0; j < num_steps; ++j)
        taus[static_cast<size_t>(j)] = (j + 1) * t_train / num_steps - 1;
    std::reverse(taus.begin(), taus.end());
    return taus;
}

}  // namespace dact
