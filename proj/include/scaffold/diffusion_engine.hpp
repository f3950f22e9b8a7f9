#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "scaffold/backbone.hpp"
#include "scaffold/noise_schedule.hpp"
#include "scaffold/voxel_data.hpp"

namespace scaffold {

struct LossOptions {
    bool active_slots_only = false;  // default: PAD slots count like tokens
    bool t_per_token = false;        // one diffusion time per slot, not per sequence
    bool antithetic = false;         // pair t with 1-t across the batch
    // Test hook: pins the per-sequence diffusion time instead of drawing it.
    std::optional<double> fixed_t;
};

struct LossValue {
    double loss = 0.0;               // mean nats per token
    std::vector<double> per_sequence;
    std::size_t token_count = 0;
};

// Monte Carlo estimate of the continuous-time objective: per sequence one
// t ~ U(0,1), corrupt, then weight the masked slots' log-scores by
// alpha'(t) / (1 - alpha(t)). Carry-over slots contribute exactly zero.
// Draw randomness is addressed by (seed, step, sequence, slot).
LossValue loss_continuous(const std::vector<TokenSequence>& batch,
                          const Denoiser& model, const NoiseSchedule& sched,
                          std::uint64_t seed, std::uint64_t step,
                          const LossOptions& opts = {});

// Discrete-time estimate: i ~ U{1..T}, corrupt at t(i), weight by
// T * (alpha_s - alpha_t) / (1 - alpha_t).
LossValue loss_discrete(const std::vector<TokenSequence>& batch,
                        const Denoiser& model, const NoiseSchedule& sched,
                        int steps, std::uint64_t seed, std::uint64_t step,
                        const LossOptions& opts = {});

struct NelboReport {
    double diffusion_term = 0.0;
    double prior_term = 0.0;   // nats per sequence
    double recons_term = 0.0;  // identically 0 under carry-over
    std::string note;
};

NelboReport nelbo_report(const std::vector<TokenSequence>& batch,
                         const Denoiser& model, const NoiseSchedule& sched,
                         std::uint64_t seed, int mc_draws = 8);

// One reverse transition applied in place: non-MASK and clamped slots are
// untouched; each MASK slot unmasks with probability
// (alpha_s - alpha_t) / (1 - alpha_t), drawing its token from probs
// restricted to block tokens. Randomness is addressed by
// (seed, step_index, slot), so any evaluation order gives the same result.
void reverse_step(LatentState& z, double s, double t, const Tensor& probs,
                  const NoiseSchedule& sched, const SpecialTokens& sp,
                  std::uint64_t seed, std::uint64_t step_index);

struct SampleTrace {
    // (t, state) from t = 1 down to t = 0 inclusive.
    std::vector<std::pair<double, LatentState>> states;
    std::uint64_t seed = 0;
    int steps = 0;
};

struct SampleResult {
    VoxelGrid grid;
    SampleTrace trace;
    std::size_t denoiser_calls = 0;
};

// Ancestral sampling on the uniform grid t(i) = i/T. Active slots start as
// MASK; PAD slots are clamped to PAD. The denoiser is conditioned on the
// time at which the latent last changed, which is what lets cached mode
// skip recomputation on steps that unmasked nothing while staying
// bit-identical to uncached mode.
SampleResult sample(const OccupancyMap& occ, const Denoiser& model,
                    const Vocabulary& vocab, const NoiseSchedule& sched,
                    int steps, std::uint64_t seed, bool cached);

// Greedy/temperature decoding with the causal baseline: k tokens in the
// canonical slot order, starting from BOS. temperature 0 means argmax.
VoxelGrid sample_autoregressive(const OccupancyMap& occ, const Backbone& net,
                                const BackboneParams& params,
                                const Vocabulary& vocab, double temperature,
                                std::uint64_t seed);

// Per-step unmask deltas as newline-delimited JSON:
// {"t":float, "unmasked":[{"slot":i,"token":id}, ...]}
void write_trace_ndjson(const SampleTrace& trace, int mask_id,
                        std::ostream& out);

// --- training-path helpers (gradient route through a concrete Backbone) --

enum class LossMode { Continuous, Discrete, Autoregressive };

const char* loss_mode_name(LossMode mode);
LossMode loss_mode_from_name(const std::string& name);

struct TrainLossResult {
    double loss = 0.0;
};

// Builds the corrupted batch, runs forward/backward, and accumulates
// parameter gradients. The value matches the Denoiser-interface estimators
// for the same (seed, step).
TrainLossResult train_loss_and_grad(const std::vector<TokenSequence>& batch,
                                    Backbone& net, const NoiseSchedule& sched,
                                    LossMode mode, int discrete_steps,
                                    std::uint64_t seed, std::uint64_t step,
                                    Workspace& ws, BackboneParams& grads,
                                    const LossOptions& opts = {});

// Value-only AR cross-entropy (mean nats per token over all slots).
LossValue loss_autoregressive(const std::vector<TokenSequence>& batch,
                              const Backbone& net, const BackboneParams& p,
                              const LossOptions& opts = {});

}  // namespace scaffold
