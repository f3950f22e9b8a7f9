#include "scaffold/diffusion_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>

#include <json.hpp>

#include "scaffold/rng.hpp"

namespace scaffold {

namespace {

// Corrupted batch plus per-slot loss weights. A slot's weight is zero when
// it carries over (was not masked) or is excluded by the slot scope; the
// AR path reuses the same shape with unit weights.
struct PreparedBatch {
    BatchInput input;
    std::vector<int> targets;      // [B*L] clean tokens
    std::vector<double> weights;   // [B*L]
    std::size_t token_count = 0;   // normalizer N
};

double draw_time(std::uint64_t seed, std::uint64_t step, std::uint32_t key,
                 const LossOptions& opts) {
    if (opts.fixed_t) return *opts.fixed_t;
    return uniform_at(seed, rng_stream::kTimeDraw, step, key, 0);
}

PreparedBatch prepare_diffusion_batch(const std::vector<TokenSequence>& batch,
                                      const NoiseSchedule& sched,
                                      bool discrete, int discrete_steps,
                                      int mask_id, std::uint64_t seed,
                                      std::uint64_t step,
                                      const LossOptions& opts) {
    const int B = static_cast<int>(batch.size());
    const int L = static_cast<int>(batch.front().length());
    PreparedBatch pb;
    pb.input.batch = B;
    pb.input.length = L;
    pb.input.tokens.resize(static_cast<std::size_t>(B) * L);
    pb.input.positions.resize(static_cast<std::size_t>(B) * L);
    pb.input.times.resize(B);
    pb.targets.resize(static_cast<std::size_t>(B) * L);
    pb.weights.assign(static_cast<std::size_t>(B) * L, 0.0);

    DiscreteTimeGrid grid{discrete_steps};

    for (int b = 0; b < B; ++b) {
        const TokenSequence& seq = batch[b];
        if (static_cast<int>(seq.length()) != L)
            fail(ErrorKind::Domain, "batch sequences must share one length");

        double t_seq = 0.0, w_seq = 0.0;
        if (discrete) {
            double u = draw_time(seed, step, static_cast<std::uint32_t>(b), opts);
            int i = 1 + static_cast<int>(u * discrete_steps);
            i = std::clamp(i, 1, discrete_steps);
            const double t = grid.t(i), s = grid.s(i);
            t_seq = t;
            w_seq = discrete_steps * (sched.alpha(s) - sched.alpha(t)) /
                    (1.0 - sched.alpha(t));
        } else if (!opts.t_per_token) {
            double t = draw_time(seed, step, static_cast<std::uint32_t>(b), opts);
            if (opts.antithetic && B % 2 == 0 && b >= B / 2)
                t = 1.0 - draw_time(seed, step,
                                    static_cast<std::uint32_t>(b - B / 2), opts);
            t_seq = t;
            w_seq = -sched.alpha_prime(t) / (1.0 - sched.alpha(t));
        }

        double t_accum = 0.0;
        for (int l = 0; l < L; ++l) {
            const std::size_t idx = static_cast<std::size_t>(b) * L + l;
            double t_slot = t_seq, w_slot = w_seq;
            if (!discrete && opts.t_per_token) {
                t_slot = draw_time(seed, step,
                                   static_cast<std::uint32_t>(b * L + l + B), opts);
                w_slot = -sched.alpha_prime(t_slot) / (1.0 - sched.alpha(t_slot));
                t_accum += t_slot;
            }
            const int clean = seq.tokens[l];
            pb.targets[idx] = clean;
            pb.input.positions[idx] = seq.positions[l];
            const double u = uniform_at(seed, rng_stream::kCorruption, step,
                                        static_cast<std::uint32_t>(b * L + l), 0);
            const bool masked = u >= sched.alpha(t_slot);
            pb.input.tokens[idx] = masked ? mask_id : clean;
            const bool counted =
                !opts.active_slots_only || l < static_cast<int>(seq.active);
            if (masked && counted) pb.weights[idx] = w_slot;
        }
        // With per-token times the denoiser conditions on their mean; the
        // ideal absorbing-state denoiser is time-independent anyway.
        pb.input.times[b] =
            (!discrete && opts.t_per_token) ? t_accum / L : t_seq;

        pb.token_count +=
            opts.active_slots_only ? seq.active : static_cast<std::size_t>(L);
    }
    return pb;
}

LossValue loss_from_probs(const PreparedBatch& pb,
                          const std::vector<TokenSequence>& batch,
                          const double* probs_all, int v_total,
                          const LossOptions& opts) {
    const int B = pb.input.batch, L = pb.input.length;
    LossValue out;
    out.token_count = pb.token_count;
    out.per_sequence.resize(B, 0.0);
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        double seq_total = 0.0;
        for (int l = 0; l < L; ++l) {
            const std::size_t idx = static_cast<std::size_t>(b) * L + l;
            const double w = pb.weights[idx];
            if (w == 0.0) continue;
            const double p = probs_all[idx * v_total + pb.targets[idx]];
            seq_total += w * (-std::log(p));
        }
        total += seq_total;
        const std::size_t n =
            opts.active_slots_only ? batch[b].active : static_cast<std::size_t>(L);
        out.per_sequence[b] = n > 0 ? seq_total / static_cast<double>(n) : 0.0;
    }
    out.loss = pb.token_count > 0 ? total / static_cast<double>(pb.token_count)
                                  : 0.0;
    return out;
}

LossValue loss_via_denoiser(const std::vector<TokenSequence>& batch,
                            const Denoiser& model, const PreparedBatch& pb,
                            const LossOptions& opts) {
    const int B = pb.input.batch, L = pb.input.length;
    const int V = model.v_total();
    Tensor probs_all;
    probs_all.reset({static_cast<std::size_t>(B) * L,
                     static_cast<std::size_t>(V)});
    std::vector<int> tokens(L);
    std::vector<Coord> positions(L);
    for (int b = 0; b < B; ++b) {
        const std::size_t off = static_cast<std::size_t>(b) * L;
        std::copy_n(pb.input.tokens.begin() + off, L, tokens.begin());
        std::copy_n(pb.input.positions.begin() + off, L, positions.begin());
        model.predict(tokens, positions, pb.input.times[b],
                      probs_all.ptr() + off * V);
    }
    return loss_from_probs(pb, batch, probs_all.ptr(), V, opts);
}

}  // namespace

LossValue loss_continuous(const std::vector<TokenSequence>& batch,
                          const Denoiser& model, const NoiseSchedule& sched,
                          std::uint64_t seed, std::uint64_t step,
                          const LossOptions& opts) {
    if (batch.empty()) fail(ErrorKind::Domain, "loss_continuous: empty batch");
    const SpecialTokens sp{model.v_total()};
    PreparedBatch pb = prepare_diffusion_batch(batch, sched, false, 0,
                                               sp.mask(), seed, step, opts);
    return loss_via_denoiser(batch, model, pb, opts);
}

LossValue loss_discrete(const std::vector<TokenSequence>& batch,
                        const Denoiser& model, const NoiseSchedule& sched,
                        int steps, std::uint64_t seed, std::uint64_t step,
                        const LossOptions& opts) {
    if (batch.empty()) fail(ErrorKind::Domain, "loss_discrete: empty batch");
    if (steps < 1) fail(ErrorKind::Domain, "loss_discrete: steps must be >= 1");
    const SpecialTokens sp{model.v_total()};
    PreparedBatch pb = prepare_diffusion_batch(batch, sched, true, steps,
                                               sp.mask(), seed, step, opts);
    return loss_via_denoiser(batch, model, pb, opts);
}

NelboReport nelbo_report(const std::vector<TokenSequence>& batch,
                         const Denoiser& model, const NoiseSchedule& sched,
                         std::uint64_t seed, int mc_draws) {
    if (batch.empty()) fail(ErrorKind::Domain, "nelbo_report: empty batch");
    NelboReport rep;
    double total = 0.0;
    for (int d = 0; d < mc_draws; ++d)
        total += loss_continuous(batch, model, sched, seed, d).loss;
    rep.diffusion_term = total / mc_draws;

    // The literal KL[q(z_1|x) || all-MASK point mass] is infinite for any
    // eps > 0 because q leaves eps survival mass outside the prior's
    // support; the finite direction KL[prior || q] = -log(1 - eps) per slot
    // is reported instead and vanishes as eps -> 0.
    const double per_slot = -std::log(1.0 - sched.eps_min);
    double slots = 0.0;
    for (const auto& seq : batch) slots += static_cast<double>(seq.length());
    rep.prior_term = per_slot * slots / static_cast<double>(batch.size());
    rep.recons_term = 0.0;
    rep.note =
        "recons_term is identically 0: carry-over pins unmasked tokens, so "
        "p(x|z_0) is a point mass on the data";
    return rep;
}

void reverse_step(LatentState& z, double s, double t, const Tensor& probs,
                  const NoiseSchedule& sched, const SpecialTokens& sp,
                  std::uint64_t seed, std::uint64_t step_index) {
    if (!(0.0 <= s && s < t && t <= 1.0))
        fail(ErrorKind::Domain, "reverse_step: need 0 <= s < t <= 1");
    const double p_unmask =
        (sched.alpha(s) - sched.alpha(t)) / (1.0 - sched.alpha(t));
    const int v_total = sp.v_total;
    const int n_blocks = sp.blocks();
    for (std::size_t l = 0; l < z.tokens.size(); ++l) {
        if (z.clamped[l] || z.tokens[l] != sp.mask()) continue;
        const double u1 = uniform_at(seed, rng_stream::kSampler, step_index,
                                     static_cast<std::uint32_t>(l), 0);
        if (u1 >= p_unmask) continue;
        // Occupied slots hold real blocks by definition of the occupancy
        // map, so the draw is restricted to block tokens.
        const double* row = probs.ptr() + l * v_total;
        double total = 0.0;
        for (int v = 0; v < n_blocks; ++v) total += row[v];
        const double u2 = uniform_at(seed, rng_stream::kSampler, step_index,
                                     static_cast<std::uint32_t>(l), 1) *
                          total;
        double cum = 0.0;
        int pick = n_blocks - 1;
        for (int v = 0; v < n_blocks; ++v) {
            cum += row[v];
            if (u2 < cum) {
                pick = v;
                break;
            }
        }
        z.tokens[l] = pick;
    }
}

SampleResult sample(const OccupancyMap& occ, const Denoiser& model,
                    const Vocabulary& vocab, const NoiseSchedule& sched,
                    int steps, std::uint64_t seed, bool cached) {
    if (steps < 1) fail(ErrorKind::Domain, "sample: steps must be >= 1");
    const SpecialTokens sp = vocab.specials();
    if (sp.v_total != model.v_total())
        fail(ErrorKind::Domain, "sample: vocabulary does not match model");
    const std::size_t k = occ.k();
    const std::size_t L = static_cast<std::size_t>(model.seq_len());
    if (k > L)
        fail(ErrorKind::SequenceOverflow,
             "occupancy has " + std::to_string(k) +
                 " voxels, sequence length is " + std::to_string(L));

    SampleResult result;
    result.trace.seed = seed;
    result.trace.steps = steps;

    LatentState z;
    z.tokens.assign(L, sp.pad());
    z.clamped.assign(L, 1);
    std::vector<Coord> positions(L, pad_coord());
    for (std::size_t i = 0; i < k; ++i) {
        z.tokens[i] = sp.mask();
        z.clamped[i] = 0;
        positions[i] = occ.occupied[i];
    }
    result.trace.states.push_back({1.0, z});

    Tensor probs;
    probs.reset({L, static_cast<std::size_t>(sp.v_total)});
    bool stale = true;         // distributions not computed for current z
    double label_t = 1.0;      // time at which z last changed

    for (int i = steps; i >= 1; --i) {
        const double t = static_cast<double>(i) / steps;
        const double s = static_cast<double>(i - 1) / steps;
        if (z.mask_count(sp.mask()) > 0) {
            if (!cached || stale) {
                // Conditioning uses the time the latent was produced, so a
                // recomputation on an unchanged latent returns the same
                // distributions the cache holds.
                std::vector<int> toks = z.tokens;
                model.predict(toks, positions, label_t, probs.ptr());
                ++result.denoiser_calls;
            }
            std::vector<int> before = z.tokens;
            reverse_step(z, s, t, probs, sched, sp, seed,
                         static_cast<std::uint64_t>(i));
            const bool changed = z.tokens != before;
            if (changed) label_t = s;
            stale = changed;
        }
        result.trace.states.push_back({s, z});
    }

    TokenSequence seq;
    seq.tokens = z.tokens;
    seq.positions = positions;
    seq.active = k;
    result.grid = reconstruct(seq, vocab, occ.dim);
    return result;
}

VoxelGrid sample_autoregressive(const OccupancyMap& occ, const Backbone& net,
                                const BackboneParams& params,
                                const Vocabulary& vocab, double temperature,
                                std::uint64_t seed) {
    const SpecialTokens sp = vocab.specials();
    const std::size_t k = occ.k();
    VoxelGrid grid;
    grid.dim = occ.dim;
    if (k == 0) return grid;
    if (static_cast<int>(k) > net.config().seq_len)
        fail(ErrorKind::SequenceOverflow,
             "occupancy has more voxels than the sequence length");

    Workspace ws;
    BatchInput in;
    std::vector<int> decoded;
    decoded.reserve(k);
    const int n_blocks = sp.blocks();

    for (std::size_t j = 0; j < k; ++j) {
        in.batch = 1;
        in.length = static_cast<int>(j + 1);
        in.tokens.resize(j + 1);
        in.positions.resize(j + 1);
        in.times.assign(1, 0.0);
        in.tokens[0] = sp.bos();
        for (std::size_t m = 1; m <= j; ++m) in.tokens[m] = decoded[m - 1];
        for (std::size_t m = 0; m <= j; ++m) in.positions[m] = occ.occupied[m];

        net.forward(params, in, ws);
        const double* lg =
            ws.logits.ptr() + static_cast<std::size_t>(j) * net.config().v_total;

        int pick = 0;
        if (temperature < 1e-9) {
            double best = lg[0];
            for (int v = 1; v < n_blocks; ++v)
                if (lg[v] > best) {
                    best = lg[v];
                    pick = v;
                }
        } else {
            double mx = lg[0];
            for (int v = 1; v < n_blocks; ++v) mx = std::max(mx, lg[v]);
            double total = 0.0;
            std::vector<double> w(n_blocks);
            for (int v = 0; v < n_blocks; ++v) {
                w[v] = std::exp((lg[v] - mx) / temperature);
                total += w[v];
            }
            const double u = uniform_at(seed, rng_stream::kSampler,
                                        static_cast<std::uint64_t>(j), 0, 0) *
                             total;
            double cum = 0.0;
            pick = n_blocks - 1;
            for (int v = 0; v < n_blocks; ++v) {
                cum += w[v];
                if (u < cum) {
                    pick = v;
                    break;
                }
            }
        }
        decoded.push_back(pick);
        grid.cells[occ.occupied[j]] = vocab.block(pick);
    }
    return grid;
}

void write_trace_ndjson(const SampleTrace& trace, int mask_id,
                        std::ostream& out) {
    using nlohmann::json;
    for (std::size_t i = 1; i < trace.states.size(); ++i) {
        const auto& prev = trace.states[i - 1].second;
        const auto& cur = trace.states[i].second;
        json deltas = json::array();
        for (std::size_t l = 0; l < cur.tokens.size(); ++l) {
            if (prev.tokens[l] == mask_id && cur.tokens[l] != mask_id) {
                deltas.push_back(
                    {{"slot", l}, {"token", cur.tokens[l]}});
            }
        }
        json line{{"t", trace.states[i].first}, {"unmasked", std::move(deltas)}};
        out << line.dump() << "\n";
    }
}

const char* loss_mode_name(LossMode mode) {
    switch (mode) {
        case LossMode::Continuous: return "continuous";
        case LossMode::Discrete: return "discrete";
        case LossMode::Autoregressive: return "autoregressive";
    }
    return "?";
}

LossMode loss_mode_from_name(const std::string& name) {
    if (name == "continuous") return LossMode::Continuous;
    if (name == "discrete") return LossMode::Discrete;
    if (name == "autoregressive") return LossMode::Autoregressive;
    fail(ErrorKind::Domain, "unknown loss mode '" + name + "'");
}

TrainLossResult train_loss_and_grad(const std::vector<TokenSequence>& batch,
                                    Backbone& net, const NoiseSchedule& sched,
                                    LossMode mode, int discrete_steps,
                                    std::uint64_t seed, std::uint64_t step,
                                    Workspace& ws, BackboneParams& grads,
                                    const LossOptions& opts) {
    if (batch.empty()) fail(ErrorKind::Domain, "train loss: empty batch");
    const BackboneConfig& cfg = net.config();
    const SpecialTokens sp = cfg.specials();
    const int B = static_cast<int>(batch.size());
    const int L = static_cast<int>(batch.front().length());
    const int V = cfg.v_total;

    PreparedBatch pb;
    if (mode == LossMode::Autoregressive) {
        if (!cfg.causal)
            fail(ErrorKind::Domain,
                 "autoregressive loss needs a causal backbone");
        pb.input.batch = B;
        pb.input.length = L;
        pb.input.tokens.resize(static_cast<std::size_t>(B) * L);
        pb.input.positions.resize(static_cast<std::size_t>(B) * L);
        pb.input.times.assign(B, 0.0);
        pb.targets.resize(static_cast<std::size_t>(B) * L);
        pb.weights.assign(static_cast<std::size_t>(B) * L, 0.0);
        for (int b = 0; b < B; ++b) {
            const TokenSequence& seq = batch[b];
            for (int l = 0; l < L; ++l) {
                const std::size_t idx = static_cast<std::size_t>(b) * L + l;
                pb.input.tokens[idx] = l == 0 ? sp.bos() : seq.tokens[l - 1];
                pb.input.positions[idx] = seq.positions[l];
                pb.targets[idx] = seq.tokens[l];
                const bool counted = !opts.active_slots_only ||
                                     l < static_cast<int>(seq.active);
                if (counted) pb.weights[idx] = 1.0;
            }
            pb.token_count += opts.active_slots_only
                                  ? seq.active
                                  : static_cast<std::size_t>(L);
        }
    } else {
        if (cfg.causal)
            fail(ErrorKind::Domain, "diffusion loss needs a bidirectional "
                                    "backbone");
        pb = prepare_diffusion_batch(batch, sched,
                                     mode == LossMode::Discrete,
                                     discrete_steps, sp.mask(), seed, step,
                                     opts);
    }

    net.forward(net.params(), pb.input, ws);

    LossValue lv = loss_from_probs(pb, batch, ws.probs.ptr(), V, opts);

    Tensor dlogits;
    dlogits.reset({static_cast<std::size_t>(B), static_cast<std::size_t>(L),
                   static_cast<std::size_t>(V)});
    const double invn = 1.0 / static_cast<double>(pb.token_count);
    for (std::size_t idx = 0; idx < static_cast<std::size_t>(B) * L; ++idx) {
        const double w = pb.weights[idx];
        if (w == 0.0) continue;
        const double c = w * invn;
        const double* pr = ws.probs.ptr() + idx * V;
        double* dl = dlogits.ptr() + idx * V;
        for (int v = 0; v < V; ++v) dl[v] = c * pr[v];
        dl[pb.targets[idx]] -= c;
    }
    net.backward(net.params(), pb.input, dlogits, ws, grads);

    return TrainLossResult{lv.loss};
}

LossValue loss_autoregressive(const std::vector<TokenSequence>& batch,
                              const Backbone& net, const BackboneParams& p,
                              const LossOptions& opts) {
    if (batch.empty())
        fail(ErrorKind::Domain, "loss_autoregressive: empty batch");
    const BackboneConfig& cfg = net.config();
    if (!cfg.causal)
        fail(ErrorKind::Domain, "loss_autoregressive needs a causal backbone");
    const SpecialTokens sp = cfg.specials();
    const int B = static_cast<int>(batch.size());
    const int L = static_cast<int>(batch.front().length());
    const int V = cfg.v_total;

    BatchInput in;
    in.batch = B;
    in.length = L;
    in.tokens.resize(static_cast<std::size_t>(B) * L);
    in.positions.resize(static_cast<std::size_t>(B) * L);
    in.times.assign(B, 0.0);
    for (int b = 0; b < B; ++b) {
        const TokenSequence& seq = batch[b];
        if (static_cast<int>(seq.length()) != L)
            fail(ErrorKind::Domain, "batch sequences must share one length");
        for (int l = 0; l < L; ++l) {
            const std::size_t idx = static_cast<std::size_t>(b) * L + l;
            in.tokens[idx] = l == 0 ? sp.bos() : seq.tokens[l - 1];
            in.positions[idx] = seq.positions[l];
        }
    }

    Workspace ws;
    net.forward(p, in, ws);

    LossValue out;
    out.per_sequence.resize(B, 0.0);
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        const TokenSequence& seq = batch[b];
        const std::size_t n =
            opts.active_slots_only ? seq.active : static_cast<std::size_t>(L);
        double seq_total = 0.0;
        for (std::size_t l = 0; l < n; ++l) {
            const std::size_t idx = static_cast<std::size_t>(b) * L + l;
            const double pr = ws.probs[idx * V + seq.tokens[l]];
            seq_total += -std::log(pr);
        }
        total += seq_total;
        out.token_count += n;
        out.per_sequence[b] = n > 0 ? seq_total / static_cast<double>(n) : 0.0;
    }
    out.loss =
        out.token_count > 0 ? total / static_cast<double>(out.token_count) : 0.0;
    return out;
}

}  // namespace scaffold
