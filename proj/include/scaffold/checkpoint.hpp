#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "scaffold/backbone.hpp"
#include "scaffold/voxel_data.hpp"

namespace scaffold {

// Optimizer moments plus the step counter; shapes mirror the parameters.
struct OptimizerState {
    BackboneParams m;
    BackboneParams v;
    std::uint64_t step = 0;

    void init_shapes(const BackboneConfig& cfg) {
        m.init_shapes(cfg);
        v.init_shapes(cfg);
        m.zero();
        v.zero();
        step = 0;
    }
};

// Everything needed to resume training bit-exactly or to sample.
struct Checkpoint {
    BackboneConfig config;
    BackboneParams params;
    BackboneParams ema;
    OptimizerState opt;
    Vocabulary vocab;
    std::uint64_t seed = 0;
    double schedule_eps = 1e-3;
};

// Single binary container, little-endian: "SCKP" magic, format version,
// config block, then named f64 arrays (params, "ema/", "opt/m/", "opt/v/",
// "vocab/block_ids", "meta/...").
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace scaffold
