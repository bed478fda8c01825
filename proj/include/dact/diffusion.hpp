#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dact/adam.hpp"
#include "dact/model.hpp"
#include "dact/rng.hpp"
#include "dact/schedule.hpp"
#include "dact/tensor.hpp"

namespace dact {

// Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
// Plain array math; the result enters the graph as a constant model input.
inline std::vector<double> q_sample(const std::vector<double>& x0, int t, const std::vector<double>& eps,
                                    const NoiseSchedule& sched) {
    if (x0.size() != eps.size()) throw std::invalid_argument("q_sample: x0/eps size mismatch");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

// Noise-prediction training loss (denoiser epsilon-MSE). For each of the
// `draws` rounds, every batch row gets an independent (t, eps) draw; the loss
// is the MSE over all rounds. x0 is the normalized action block [B, S, A];
// cond may contain null-condition rows (classifier-free dropout is the
// caller's responsibility).
template <class Real>
Tensor<Real> training_loss(const ActionModel<Real>& model, const Tensor<Real>& x0, const Tensor<Real>& cond,
                           const NoiseSchedule& sched, Rng& rng, int draws = 8) {
    if (draws < 1) throw std::invalid_argument("training_loss: draws must be >= 1");
    if (x0.ndim() != 3) shape_error("training_loss: x0 must be [B,S,A]");
    const int64_t B = x0.dim(0), S = x0.dim(1), A = x0.dim(2);
    const int64_t rows = B * draws;

    auto cond_rep = repeat_rows(cond, draws);
    auto noisy = Tensor<Real>::zeros({rows, S, A});
    auto eps = Tensor<Real>::zeros({rows, S, A});
    std::vector<int> steps(static_cast<size_t>(rows));
    const int64_t block = S * A;
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t src = r % B;
        const int t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.t_train)));
        steps[static_cast<size_t>(r)] = t;
        const double ab = sched.alpha_bar(t);
        const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
        for (int64_t i = 0; i < block; ++i) {
            const double e = rng.normal();
            eps.data()[r * block + i] = static_cast<Real>(e);
            noisy.data()[r * block + i] =
                static_cast<Real>(ca * static_cast<double>(x0.data()[src * block + i]) + cb * e);
        }
    }

    auto pred = model.forward(noisy, cond_rep, steps);
    auto loss = mse(pred, eps);
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw TrainingError("training_loss: non-finite loss");
    return loss;
}

// Deterministic-by-default DDIM sampler with classifier-free guidance.
// Returns a normalized action block [S * A] for a single condition row.
// cfg_scale == 1 short-circuits to the conditional branch so the guidance
// identity eps = eps_c holds exactly.
template <class Real>
std::vector<double> ddim_sample(const ActionModel<Real>& model, const std::vector<Real>& cond_row,
                                const NoiseSchedule& sched, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate(sched.t_train);
    const bool guided = cfg.cfg_scale != 1.0;
    if (guided && !model.has_null_cond())
        throw std::invalid_argument("ddim_sample: cfg_scale != 1 requires a model with a null-condition embedding");
    const int64_t S = model.seq_len(), A = model.action_dim(), D = model.cond_dim();
    if (static_cast<int64_t>(cond_row.size()) != D) shape_error("ddim_sample: cond width mismatch");

    NoGradGuard ng;

    // Conditional row plus, when guided, the null row in one batched forward.
    const int64_t B = guided ? 2 : 1;
    auto cond = Tensor<Real>::zeros({B, D});
    std::copy(cond_row.begin(), cond_row.end(), cond.data().begin());
    if (guided) {
        const auto& null_row = model.null_cond().data();
        std::copy(null_row.begin(), null_row.end(), cond.data().begin() + D);
    }

    const int64_t block = S * A;
    std::vector<double> x(static_cast<size_t>(block));
    for (auto& v : x) v = rng.normal();

    const auto taus = ddim_timesteps(sched.t_train, cfg.num_ddim_steps);
    auto noisy = Tensor<Real>::zeros({B, S, A});
    for (int j = static_cast<int>(taus.size()) - 1; j >= 0; --j) {
        const int t = taus[static_cast<size_t>(j)];
        const double ab = sched.alpha_bar(t);
        const double ab_prev = j > 0 ? sched.alpha_bar(taus[static_cast<size_t>(j - 1)]) : 1.0;

        for (int64_t r = 0; r < B; ++r)
            for (int64_t i = 0; i < block; ++i) noisy.data()[r * block + i] = static_cast<Real>(x[static_cast<size_t>(i)]);
        const std::vector<int> steps(static_cast<size_t>(B), t);
        auto pred = model.forward(noisy, cond, steps);

        std::vector<double> eps_hat(static_cast<size_t>(block));
        for (int64_t i = 0; i < block; ++i) {
            const double ec = static_cast<double>(pred.data()[i]);
            if (guided) {
                const double eu = static_cast<double>(pred.data()[block + i]);
                eps_hat[static_cast<size_t>(i)] = eu + cfg.cfg_scale * (ec - eu);
            } else {
                eps_hat[static_cast<size_t>(i)] = ec;
            }
        }

        const double sab = std::sqrt(ab);
        const double snab = std::sqrt(1.0 - ab);
        double sigma = 0.0;
        if (cfg.eta > 0.0 && j > 0) {
            sigma = cfg.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
        }
        const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
        for (int64_t i = 0; i < block; ++i) {
            const double e = eps_hat[static_cast<size_t>(i)];
            const double x0_hat = (x[static_cast<size_t>(i)] - snab * e) / sab;
            double next = std::sqrt(ab_prev) * x0_hat + dir * e;
            if (sigma > 0.0) next += sigma * rng.normal();
            x[static_cast<size_t>(i)] = next;
        }
    }

    for (auto& v : x) v = std::min(1.0, std::max(-1.0, v));
    return x;
}

}  // namespace dact
