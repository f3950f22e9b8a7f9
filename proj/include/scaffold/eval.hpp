#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "scaffold/diffusion_engine.hpp"

namespace scaffold {

struct EvalReport {
    double nll = 0.0;         // mean nats per token
    double perplexity = 1.0;  // exp(nll)
    double std_error = 0.0;   // Monte Carlo standard error of nll
    std::size_t token_count = 0;
    int mc_draws = 0;
    std::map<int, std::size_t> category_frequency;  // token id -> count
    std::vector<std::uint64_t> draw_seeds;
};

// Averages the continuous-time objective over mc_draws corruption draws
// per sequence. Use the EMA weights for reported numbers.
EvalReport evaluate_nll(const std::vector<TokenSequence>& dataset,
                        const Denoiser& model, const NoiseSchedule& sched,
                        int mc_draws, std::uint64_t seed,
                        const LossOptions& opts = {});

// Cross-entropy evaluation for the causal baseline (no corruption draws).
EvalReport evaluate_nll_autoregressive(
    const std::vector<TokenSequence>& dataset, const Backbone& net,
    const BackboneParams& params, const LossOptions& opts = {});

struct CategoryHistogram {
    std::map<int, std::size_t> counts;  // block id -> voxel count
    std::size_t total = 0;
    double collapse_score = 0.0;  // fraction held by the top three ids
};

CategoryHistogram category_histogram(const std::vector<VoxelGrid>& structures);

struct GenerateOptions {
    int steps = 256;
    bool cached = true;
    bool write_json = true;
    bool write_binary = false;
    bool write_trace = false;
    bool autoregressive = false;
    double temperature = 1.0;
};

struct GeneratedItem {
    std::uint64_t seed = 0;
    VoxelGrid grid;
    std::vector<std::string> files;
    std::string error;  // non-empty when this item failed
};

// Samples one structure per (occupancy, seed) pair and writes it under
// out_dir; file names embed the seed and step count. Per-item failures are
// recorded and the batch continues.
std::vector<GeneratedItem> generate_batch(
    const std::vector<OccupancyMap>& occupancies,
    const std::vector<std::uint64_t>& seeds, const Backbone& net,
    const BackboneParams& params, const Vocabulary& vocab,
    const NoiseSchedule& sched, const std::string& out_dir,
    const GenerateOptions& opts);

}  // namespace scaffold
