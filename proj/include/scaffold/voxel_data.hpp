#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scaffold/common.hpp"

namespace scaffold {

// One line of a 3D-Craft style placement log.
struct BlockPlacement {
    std::string house_id;
    std::int64_t x = 0, y = 0, z = 0;
    int block_id = 0;       // [0, 255]; 0 is air and deletes on replay
    std::int64_t t = 0;     // ordinal timestamp, monotone within a house
};

struct ParseIssue {
    std::size_t line = 0;
    std::string reason;
};

struct ParsedPlacements {
    // Houses in first-appearance order; placements stably sorted by t.
    std::vector<std::pair<std::string, std::vector<BlockPlacement>>> houses;
    std::vector<ParseIssue> issues;
    std::size_t records_ok = 0;
};

// Newline-delimited JSON, one placement per line:
// {"house_id":str, "x":int, "y":int, "z":int, "block_id":int, "t":int}
// Malformed lines become issues with their line number; parsing continues.
ParsedPlacements parse_placements(std::istream& in);

// Sparse voxel cube. Keys are grid coordinates in [0, dim)^3, values the
// original block ids. std::map keeps cells in the canonical lexicographic
// (x, y, z) order.
struct VoxelGrid {
    int dim = 0;
    std::map<Coord, int> cells;
    // Last-write rank per cell, for the placement-order sequence mode.
    // Empty for grids that never came from a placement log.
    std::map<Coord, std::int64_t> placement_rank;

    std::size_t occupied() const noexcept { return cells.size(); }
    friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
        return a.dim == b.dim && a.cells == b.cells;
    }
};

// Replays placements into a grid: later writes win, air (block_id 0)
// deletes, and the minimum occupied corner is translated to the origin.
// Throws StructureTooLarge when the final extent exceeds dim on any axis.
VoxelGrid voxelize(const std::vector<BlockPlacement>& placements, int dim);

struct FilterResult {
    std::vector<VoxelGrid> retained;
    std::vector<std::size_t> retained_indices;  // into the input list
    std::size_t rejected_empty = 0;
    std::size_t rejected_too_many = 0;
    std::size_t rejected_extent = 0;

    std::size_t rejected() const noexcept {
        return rejected_empty + rejected_too_many + rejected_extent;
    }
};

// Keeps grids with 1 <= k <= max_blocks whose extent fits dim^3.
FilterResult filter_dataset(std::vector<VoxelGrid> grids,
                            std::size_t max_blocks, int dim);

// Bijection between observed block ids and dense tokens [0, |V|), with
// MASK/PAD/BOS appended after the block tokens.
class Vocabulary {
  public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<int> block_ids);

    static Vocabulary from_grids(const std::vector<VoxelGrid>& grids);

    int size() const noexcept { return static_cast<int>(block_ids_.size()); }
    int total() const noexcept { return size() + 3; }
    SpecialTokens specials() const noexcept { return SpecialTokens{total()}; }

    int token(int block_id) const;  // throws Data on unknown block id
    int block(int token) const;     // throws Domain on non-block token
    const std::vector<int>& block_ids() const noexcept { return block_ids_; }

  private:
    std::vector<int> block_ids_;      // token -> block id, strictly ascending
    std::map<int, int> block_to_tok_;
};

// Length-L token vector plus per-slot coordinates. Slots [0, active) hold
// block tokens with real positions, slots [active, L) hold PAD with the
// sentinel position.
struct TokenSequence {
    std::vector<int> tokens;
    std::vector<Coord> positions;
    std::size_t active = 0;

    std::size_t length() const noexcept { return tokens.size(); }
};

enum class SequenceOrder {
    Lexicographic,  // (x, y, z) ascending; always available
    Placement,      // last-write order from the placement log
};

TokenSequence extract_sequence(const VoxelGrid& grid, std::size_t seq_len,
                               const Vocabulary& vocab,
                               SequenceOrder order = SequenceOrder::Lexicographic);

VoxelGrid reconstruct(const TokenSequence& seq, const Vocabulary& vocab,
                      int dim);

// Boolean conditioning signal: which voxels are occupied.
struct OccupancyMap {
    int dim = 0;
    std::vector<Coord> occupied;  // lexicographically sorted

    std::size_t k() const noexcept { return occupied.size(); }
};

OccupancyMap footprint(const VoxelGrid& grid);

struct SparsityStats {
    std::size_t grid_count = 0;
    double mean_background_fraction = 0.0;
    std::map<std::size_t, std::size_t> k_histogram;
    std::map<int, std::size_t> category_histogram;  // by original block id
};

SparsityStats sparsity_stats(const std::vector<VoxelGrid>& grids, int dim);

// --- file formats ------------------------------------------------------

// {"dim":D, "voxels":[{"x":..,"y":..,"z":..,"id":..}, ...]}
void write_voxel_json(const VoxelGrid& grid, std::ostream& out);
VoxelGrid read_voxel_json(std::istream& in);

// "SCFD", u32 dim, u32 count, count * (u16 x, u16 y, u16 z, u16 id), LE.
void write_voxel_scfd(const VoxelGrid& grid, std::ostream& out);
VoxelGrid read_voxel_scfd(std::istream& in);

// {"dim":D, "occupied":[[x,y,z], ...]}
void write_occupancy_json(const OccupancyMap& occ, std::ostream& out);
OccupancyMap read_occupancy_json(std::istream& in);

}  // namespace scaffold
