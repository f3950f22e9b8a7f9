#pragma once

#include <cstdint>
#include <vector>

#include "scaffold/voxel_data.hpp"

namespace scaffold {

// Deterministic four-category rule: the block id at a voxel is a function
// of the x/y coordinate parities. Used by the end-to-end sanity task.
int parity_block_id(Coord c);

// Random occupancy footprints in a dim^3 cube with block ids from the
// parity rule. k is drawn uniformly from [k_min, k_max] per house.
std::vector<VoxelGrid> make_parity_houses(std::size_t houses, int dim,
                                          std::size_t k_min, std::size_t k_max,
                                          std::uint64_t seed);

// Fraction of voxels whose block id matches the parity rule.
double parity_rule_accuracy(const VoxelGrid& grid);

// Sticky-chain task: walking the canonical slot order, each voxel repeats
// the previous voxel's block id with probability stay_prob and otherwise
// redraws uniformly from `categories` ids. Gives per-house runs whose
// lengths an overconfident next-token model exaggerates.
std::vector<VoxelGrid> make_sticky_houses(std::size_t houses, int dim,
                                          std::size_t k_min, std::size_t k_max,
                                          double stay_prob, int categories,
                                          std::uint64_t seed);

// Placement-log lines for a set of grids (one placement per voxel), for
// exercising the ingestion pipeline end to end.
std::vector<BlockPlacement> placements_from_grids(
    const std::vector<VoxelGrid>& grids);

}  // namespace scaffold
