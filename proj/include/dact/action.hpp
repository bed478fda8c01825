#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dact {

// 7-DoF gripper action: relative end-effector translation (meters), Euler
// rotation deltas (radians), and a binary open/close state.
struct ActionVector {
    double dx = 0, dy = 0, dz = 0;
    double droll = 0, dpitch = 0, dyaw = 0;
    double gripper = 0;  // {0,1}; thresholded at 0.5

    static constexpr int kDim = 7;

    double& operator[](int i) {
        switch (i) {
            case 0: return dx;
            case 1: return dy;
            case 2: return dz;
            case 3: return droll;
            case 4: return dpitch;
            case 5: return dyaw;
            case 6: return gripper;
        }
        throw std::out_of_range("ActionVector index");
    }
    double operator[](int i) const { return const_cast<ActionVector&>(*this)[i]; }

    std::array<double, 7> to_array() const { return {dx, dy, dz, droll, dpitch, dyaw, gripper}; }

    static ActionVector from_array(const std::array<double, 7>& a) {
        ActionVector v;
        for (int i = 0; i < 7; ++i) v[i] = a[static_cast<size_t>(i)];
        return v;
    }

    // The continuous 6D part attached to the cosine-similarity weighting.
    std::array<double, 6> continuous6() const { return {dx, dy, dz, droll, dpitch, dyaw}; }

    bool finite() const {
        for (int i = 0; i < 7; ++i)
            if (!std::isfinite((*this)[i])) return false;
        return true;
    }
};

// Ordered block of N+1 actions: the current action plus N future ones.
using ActionSequence = std::vector<ActionVector>;

inline ActionSequence sequence_from_flat(const std::vector<double>& flat) {
    if (flat.size() % ActionVector::kDim != 0) throw std::invalid_argument("sequence_from_flat: length not a multiple of 7");
    ActionSequence seq(flat.size() / ActionVector::kDim);
    for (size_t s = 0; s < seq.size(); ++s)
        for (int i = 0; i < ActionVector::kDim; ++i) seq[s][i] = flat[s * ActionVector::kDim + static_cast<size_t>(i)];
    return seq;
}

inline std::vector<double> sequence_to_flat(const ActionSequence& seq) {
    std::vector<double> flat(seq.size() * ActionVector::kDim);
    for (size_t s = 0; s < seq.size(); ++s)
        for (int i = 0; i < ActionVector::kDim; ++i) flat[s * ActionVector::kDim + static_cast<size_t>(i)] = seq[s][i];
    return flat;
}

}  // namespace dact
