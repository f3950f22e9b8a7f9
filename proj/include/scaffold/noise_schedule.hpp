#pragma once

#include <cstdint>
#include <vector>

#include "scaffold/common.hpp"
#include "scaffold/rng.hpp"
#include "scaffold/tensor.hpp"
#include "scaffold/voxel_data.hpp"

namespace scaffold {

// Survival probability alpha(t) = 1 - (1 - eps) * t: the log-linear
// schedule's closed form, with alpha(0) = 1 and alpha(1) = eps. Keeping
// eps > 0 bounds the 1/(1 - alpha) loss weight.
struct NoiseSchedule {
    double eps_min = 1e-3;

    double alpha(double t) const;
    double alpha_prime(double t) const;
};

// Uniform grid t(i) = i/T, s(i) = (i-1)/T for i in 1..T.
struct DiscreteTimeGrid {
    int steps = 0;

    double t(int i) const { return static_cast<double>(i) / steps; }
    double s(int i) const { return static_cast<double>(i - 1) / steps; }
    // Per-step mask probability 1 - alpha(t(i)) / alpha(s(i)).
    double beta(const NoiseSchedule& sched, int i) const;
};

// Row-stochastic absorbing transition matrix [v_total, v_total]:
// Q[v][v] = 1-beta, Q[v][mask] = beta, Q[mask][mask] = 1.
Tensor absorbing_kernel(double beta, int v_total, int mask_id);

// Token vector over the full vocabulary (possibly containing MASK) plus a
// per-slot flag for slots pinned by conditioning.
struct LatentState {
    std::vector<int> tokens;
    std::vector<std::uint8_t> clamped;

    std::size_t mask_count(int mask_id) const;
    friend bool operator==(const LatentState&, const LatentState&) = default;
};

// Closed-form forward marginal: each slot keeps its token with probability
// alpha(t), otherwise becomes MASK. PAD slots are treated like any other
// token; conditional sampling is where PAD gets clamped instead.
LatentState forward_corrupt(const TokenSequence& seq, double t,
                            const NoiseSchedule& sched, Rng& rng, int mask_id);

}  // namespace scaffold
