#include "scaffold/noise_schedule.hpp"

namespace scaffold {

double NoiseSchedule::alpha(double t) const {
    if (t < 0.0 || t > 1.0)
        fail(ErrorKind::Domain, "alpha: t = " + std::to_string(t) +
                                    " outside [0,1]");
    return 1.0 - (1.0 - eps_min) * t;
}

double NoiseSchedule::alpha_prime(double t) const {
    if (t < 0.0 || t > 1.0)
        fail(ErrorKind::Domain, "alpha_prime: t = " + std::to_string(t) +
                                    " outside [0,1]");
    return -(1.0 - eps_min);
}

double DiscreteTimeGrid::beta(const NoiseSchedule& sched, int i) const {
    return 1.0 - sched.alpha(t(i)) / sched.alpha(s(i));
}

Tensor absorbing_kernel(double beta, int v_total, int mask_id) {
    if (beta < 0.0 || beta > 1.0)
        fail(ErrorKind::Domain, "absorbing_kernel: beta outside [0,1]");
    Tensor q;
    q.reset({static_cast<std::size_t>(v_total),
             static_cast<std::size_t>(v_total)});
    for (int v = 0; v < v_total; ++v) {
        if (v == mask_id) {
            q[v * v_total + v] = 1.0;
        } else {
            q[v * v_total + v] = 1.0 - beta;
            q[v * v_total + mask_id] += beta;
        }
    }
    return q;
}

std::size_t LatentState::mask_count(int mask_id) const {
    std::size_t n = 0;
    for (int t : tokens)
        if (t == mask_id) ++n;
    return n;
}

LatentState forward_corrupt(const TokenSequence& seq, double t,
                            const NoiseSchedule& sched, Rng& rng,
                            int mask_id) {
    const double keep = sched.alpha(t);
    LatentState z;
    z.tokens = seq.tokens;
    z.clamped.assign(seq.tokens.size(), 0);
    for (auto& tok : z.tokens) {
        if (rng.uniform() >= keep) tok = mask_id;
    }
    return z;
}

}  // namespace scaffold
