#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scaffold/checkpoint.hpp"
#include "scaffold/config.hpp"
#include "scaffold/diffusion_engine.hpp"

namespace scaffold {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t warmup_steps = 2500;
};

// Effective learning rate at a 1-based step: linear ramp over the warmup,
// constant afterwards.
double warmup_lr(const AdamConfig& cfg, std::uint64_t step);

// Decoupled-weight-decay adaptive update with bias correction. Scans all
// gradients first and aborts (naming the tensor) on any non-finite value.
// Returns the global gradient L2 norm.
double optimizer_step(BackboneParams& params, const BackboneParams& grads,
                      OptimizerState& state, const AdamConfig& cfg);

// shadow <- decay * shadow + (1 - decay) * params, elementwise.
void ema_update(const BackboneParams& params, BackboneParams& shadow,
                double decay);

// Optional in-place global-norm clip; returns the pre-clip norm.
double clip_gradients(BackboneParams& grads, double max_norm);

struct TrainConfig {
    AdamConfig adam;
    std::uint64_t max_steps = 20000;  // desk-scale default; cap is 1e6
    double ema_decay = 0.9999;
    int batch_size = 32;
    LossMode loss_mode = LossMode::Continuous;
    int discrete_steps = 1000;     // T for the discrete objective
    double grad_clip = 0.0;        // 0 disables clipping
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_interval = 1000;
    std::string out_dir = "runs/default";
    double schedule_eps = 1e-3;
    LossOptions loss_options;

    void validate() const;
};

TrainConfig train_config_from(const Config& cfg);
BackboneConfig backbone_config_from(const Config& cfg, int v_total);

struct CurvePoint {
    std::uint64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

struct TrainResult {
    std::string checkpoint_path;
    std::vector<CurvePoint> curve;
};

// Deterministic mini-batch index for a global step: batches walk
// per-epoch Fisher-Yates permutations derived from (seed, epoch), so a
// resumed run reproduces the exact data order of an uninterrupted one.
std::size_t batch_index(std::uint64_t seed, std::size_t dataset_size,
                        std::uint64_t global_slot);

// Runs (or resumes) the optimization loop: shuffled mini-batches, AdamW
// with warmup, EMA shadow update, CSV loss curve, periodic atomic
// checkpoints. `resume_from` empty means a fresh run.
TrainResult train(const std::vector<TokenSequence>& dataset,
                  const Vocabulary& vocab, Backbone& net,
                  const TrainConfig& cfg,
                  const std::string& resume_from = "",
                  const std::function<void(const CurvePoint&)>& on_step = {});

}  // namespace scaffold
