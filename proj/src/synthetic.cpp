#include "scaffold/synthetic.hpp"

#include <algorithm>

#include "scaffold/rng.hpp"

namespace scaffold {

namespace {

// k distinct cells of a dim^3 cube via a partial Fisher-Yates shuffle.
std::vector<Coord> random_footprint(int dim, std::size_t k, Rng& rng) {
    const std::size_t cube = static_cast<std::size_t>(dim) * dim * dim;
    std::vector<std::uint32_t> cells(cube);
    for (std::size_t i = 0; i < cube; ++i)
        cells[i] = static_cast<std::uint32_t>(i);
    std::vector<Coord> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(rng.uniform() * (cube - i));
        std::swap(cells[i], cells[j]);
        const std::uint32_t c = cells[i];
        out.push_back(Coord{static_cast<std::int16_t>(c / (dim * dim)),
                            static_cast<std::int16_t>((c / dim) % dim),
                            static_cast<std::int16_t>(c % dim)});
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t draw_k(std::size_t k_min, std::size_t k_max, Rng& rng) {
    if (k_max < k_min) std::swap(k_min, k_max);
    return k_min +
           static_cast<std::size_t>(rng.uniform() * (k_max - k_min + 1));
}

}  // namespace

int parity_block_id(Coord c) {
    return 1 + (c.x % 2) + 2 * (c.y % 2);  // ids 1..4
}

std::vector<VoxelGrid> make_parity_houses(std::size_t houses, int dim,
                                          std::size_t k_min, std::size_t k_max,
                                          std::uint64_t seed) {
    std::vector<VoxelGrid> grids;
    grids.reserve(houses);
    for (std::size_t h = 0; h < houses; ++h) {
        Rng rng(seed, rng_stream::kSynthetic + (h << 8));
        VoxelGrid g;
        g.dim = dim;
        for (const Coord& c : random_footprint(dim, draw_k(k_min, k_max, rng), rng))
            g.cells[c] = parity_block_id(c);
        grids.push_back(std::move(g));
    }
    return grids;
}

double parity_rule_accuracy(const VoxelGrid& grid) {
    if (grid.cells.empty()) return 1.0;
    std::size_t ok = 0;
    for (const auto& [c, id] : grid.cells)
        if (id == parity_block_id(c)) ++ok;
    return static_cast<double>(ok) / static_cast<double>(grid.cells.size());
}

std::vector<VoxelGrid> make_sticky_houses(std::size_t houses, int dim,
                                          std::size_t k_min, std::size_t k_max,
                                          double stay_prob, int categories,
                                          std::uint64_t seed) {
    std::vector<VoxelGrid> grids;
    grids.reserve(houses);
    for (std::size_t h = 0; h < houses; ++h) {
        Rng rng(seed, rng_stream::kSynthetic + (h << 8) + 1);
        VoxelGrid g;
        g.dim = dim;
        auto cells = random_footprint(dim, draw_k(k_min, k_max, rng), rng);
        int prev = 1 + static_cast<int>(rng.uniform() * categories);
        for (const Coord& c : cells) {
            if (rng.uniform() >= stay_prob)
                prev = 1 + static_cast<int>(rng.uniform() * categories);
            g.cells[c] = prev;
        }
        grids.push_back(std::move(g));
    }
    return grids;
}

std::vector<BlockPlacement> placements_from_grids(
    const std::vector<VoxelGrid>& grids) {
    std::vector<BlockPlacement> out;
    for (std::size_t h = 0; h < grids.size(); ++h) {
        std::int64_t t = 0;
        for (const auto& [c, id] : grids[h].cells) {
            BlockPlacement p;
            p.house_id = "house_" + std::to_string(h);
            p.x = c.x;
            p.y = c.y;
            p.z = c.z;
            p.block_id = id;
            p.t = t++;
            out.push_back(std::move(p));
        }
    }
    return out;
}

}  // namespace scaffold
