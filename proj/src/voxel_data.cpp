#include "scaffold/voxel_data.hpp"

#include <algorithm>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

#include <json.hpp>

namespace scaffold {

using nlohmann::json;

namespace {

bool get_int_field(const json& j, const char* key, std::int64_t& out,
                   std::string& reason) {
    auto it = j.find(key);
    if (it == j.end()) {
        reason = std::string("missing field '") + key + "'";
        return false;
    }
    if (!it->is_number_integer()) {
        reason = std::string("field '") + key + "' is not an integer";
        return false;
    }
    out = it->get<std::int64_t>();
    return true;
}

}  // namespace

ParsedPlacements parse_placements(std::istream& in) {
    ParsedPlacements result;
    std::map<std::string, std::size_t> house_index;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
            continue;

        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            result.issues.push_back({line_no, "not a JSON object"});
            continue;
        }

        BlockPlacement p;
        std::string reason;
        auto hid = j.find("house_id");
        if (hid == j.end() || !hid->is_string()) {
            result.issues.push_back({line_no, "missing field 'house_id'"});
            continue;
        }
        p.house_id = hid->get<std::string>();

        std::int64_t block_id = 0;
        if (!get_int_field(j, "x", p.x, reason) ||
            !get_int_field(j, "y", p.y, reason) ||
            !get_int_field(j, "z", p.z, reason) ||
            !get_int_field(j, "block_id", block_id, reason) ||
            !get_int_field(j, "t", p.t, reason)) {
            result.issues.push_back({line_no, reason});
            continue;
        }
        if (block_id < 0 || block_id > 255) {
            result.issues.push_back(
                {line_no, "block_id " + std::to_string(block_id) +
                              " out of range [0,255]"});
            continue;
        }
        p.block_id = static_cast<int>(block_id);

        auto [it, inserted] =
            house_index.try_emplace(p.house_id, result.houses.size());
        if (inserted) result.houses.push_back({p.house_id, {}});
        result.houses[it->second].second.push_back(std::move(p));
        ++result.records_ok;
    }

    for (auto& [id, placements] : result.houses) {
        std::stable_sort(placements.begin(), placements.end(),
                         [](const BlockPlacement& a, const BlockPlacement& b) {
                             return a.t < b.t;
                         });
    }
    return result;
}

VoxelGrid voxelize(const std::vector<BlockPlacement>& placements, int dim) {
    if (placements.empty())
        fail(ErrorKind::Domain, "voxelize: empty placement list");
    if (dim <= 0) fail(ErrorKind::Domain, "voxelize: dim must be positive");

    // Replay in world coordinates: later writes win, air deletes.
    struct CellState {
        int block_id;
        std::int64_t rank;
    };
    std::map<std::array<std::int64_t, 3>, CellState> world;
    std::int64_t rank = 0;
    for (const auto& p : placements) {
        std::array<std::int64_t, 3> key{p.x, p.y, p.z};
        if (p.block_id == 0) {
            world.erase(key);
        } else {
            world[key] = CellState{p.block_id, rank};
        }
        ++rank;
    }

    VoxelGrid grid;
    grid.dim = dim;
    if (world.empty()) return grid;

    std::array<std::int64_t, 3> lo{std::numeric_limits<std::int64_t>::max(),
                                   std::numeric_limits<std::int64_t>::max(),
                                   std::numeric_limits<std::int64_t>::max()};
    std::array<std::int64_t, 3> hi{std::numeric_limits<std::int64_t>::min(),
                                   std::numeric_limits<std::int64_t>::min(),
                                   std::numeric_limits<std::int64_t>::min()};
    for (const auto& [key, cell] : world) {
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], key[a]);
            hi[a] = std::max(hi[a], key[a]);
        }
    }
    const char* axis_names = "xyz";
    for (int a = 0; a < 3; ++a) {
        std::int64_t extent = hi[a] - lo[a] + 1;
        if (extent > dim) {
            fail(ErrorKind::StructureTooLarge,
                 std::string("structure extent ") + std::to_string(extent) +
                     " on axis " + axis_names[a] + " exceeds dim " +
                     std::to_string(dim));
        }
    }

    for (const auto& [key, cell] : world) {
        Coord c{static_cast<std::int16_t>(key[0] - lo[0]),
                static_cast<std::int16_t>(key[1] - lo[1]),
                static_cast<std::int16_t>(key[2] - lo[2])};
        grid.cells[c] = cell.block_id;
        grid.placement_rank[c] = cell.rank;
    }
    return grid;
}

FilterResult filter_dataset(std::vector<VoxelGrid> grids,
                            std::size_t max_blocks, int dim) {
    FilterResult result;
    for (std::size_t i = 0; i < grids.size(); ++i) {
        VoxelGrid& g = grids[i];
        if (g.cells.empty()) {
            ++result.rejected_empty;
            continue;
        }
        if (g.occupied() > max_blocks) {
            ++result.rejected_too_many;
            continue;
        }
        bool fits = true;
        for (const auto& [c, id] : g.cells) {
            if (c.x >= dim || c.y >= dim || c.z >= dim) {
                fits = false;
                break;
            }
        }
        if (!fits) {
            ++result.rejected_extent;
            continue;
        }
        g.dim = dim;
        result.retained.push_back(std::move(g));
        result.retained_indices.push_back(i);
    }
    return result;
}

Vocabulary::Vocabulary(std::vector<int> block_ids)
    : block_ids_(std::move(block_ids)) {
    std::sort(block_ids_.begin(), block_ids_.end());
    block_ids_.erase(std::unique(block_ids_.begin(), block_ids_.end()),
                     block_ids_.end());
    for (std::size_t i = 0; i < block_ids_.size(); ++i)
        block_to_tok_[block_ids_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::from_grids(const std::vector<VoxelGrid>& grids) {
    std::vector<int> ids;
    for (const auto& g : grids)
        for (const auto& [c, id] : g.cells) ids.push_back(id);
    return Vocabulary(std::move(ids));
}

int Vocabulary::token(int block_id) const {
    auto it = block_to_tok_.find(block_id);
    if (it == block_to_tok_.end())
        fail(ErrorKind::Data,
             "block id " + std::to_string(block_id) + " not in vocabulary");
    return it->second;
}

int Vocabulary::block(int tok) const {
    if (tok < 0 || tok >= size())
        fail(ErrorKind::Domain,
             "token " + std::to_string(tok) + " is not a block token");
    return block_ids_[tok];
}

TokenSequence extract_sequence(const VoxelGrid& grid, std::size_t seq_len,
                               const Vocabulary& vocab, SequenceOrder order) {
    if (grid.occupied() > seq_len)
        fail(ErrorKind::SequenceOverflow,
             "grid has " + std::to_string(grid.occupied()) +
                 " occupied voxels, sequence length is " +
                 std::to_string(seq_len));

    std::vector<std::pair<Coord, int>> cells(grid.cells.begin(),
                                             grid.cells.end());
    if (order == SequenceOrder::Placement) {
        if (grid.placement_rank.size() != grid.cells.size())
            fail(ErrorKind::Domain,
                 "placement-order extraction needs placement ranks");
        std::sort(cells.begin(), cells.end(),
                  [&](const auto& a, const auto& b) {
                      return grid.placement_rank.at(a.first) <
                             grid.placement_rank.at(b.first);
                  });
    }
    // std::map iteration already gives lexicographic (x, y, z) order.

    const SpecialTokens sp = vocab.specials();
    TokenSequence seq;
    seq.tokens.assign(seq_len, sp.pad());
    seq.positions.assign(seq_len, pad_coord());
    seq.active = cells.size();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        seq.tokens[i] = vocab.token(cells[i].second);
        seq.positions[i] = cells[i].first;
    }
    return seq;
}

VoxelGrid reconstruct(const TokenSequence& seq, const Vocabulary& vocab,
                      int dim) {
    const SpecialTokens sp = vocab.specials();
    VoxelGrid grid;
    grid.dim = dim;
    for (std::size_t i = 0; i < seq.active; ++i) {
        int tok = seq.tokens[i];
        if (tok == sp.mask())
            fail(ErrorKind::IncompleteSample,
                 "MASK token in active slot " + std::to_string(i));
        if (!sp.is_block(tok))
            fail(ErrorKind::Data, "non-block token " + std::to_string(tok) +
                                      " in active slot " + std::to_string(i));
        Coord c = seq.positions[i];
        if (c.is_pad() || c.x >= dim || c.y >= dim || c.z >= dim)
            fail(ErrorKind::Domain,
                 "active slot " + std::to_string(i) + " has invalid position");
        auto [it, inserted] = grid.cells.try_emplace(c, vocab.block(tok));
        if (!inserted)
            fail(ErrorKind::DuplicatePosition,
                 "duplicate position at slot " + std::to_string(i));
    }
    return grid;
}

OccupancyMap footprint(const VoxelGrid& grid) {
    OccupancyMap occ;
    occ.dim = grid.dim;
    occ.occupied.reserve(grid.cells.size());
    for (const auto& [c, id] : grid.cells) occ.occupied.push_back(c);
    return occ;
}

SparsityStats sparsity_stats(const std::vector<VoxelGrid>& grids, int dim) {
    if (grids.empty())
        fail(ErrorKind::Domain, "sparsity_stats: empty grid list");
    SparsityStats stats;
    stats.grid_count = grids.size();
    const double cube = static_cast<double>(dim) * dim * dim;
    double sum = 0.0;
    for (const auto& g : grids) {
        sum += 1.0 - static_cast<double>(g.occupied()) / cube;
        ++stats.k_histogram[g.occupied()];
        for (const auto& [c, id] : g.cells) ++stats.category_histogram[id];
    }
    stats.mean_background_fraction = sum / static_cast<double>(grids.size());
    return stats;
}

void write_voxel_json(const VoxelGrid& grid, std::ostream& out) {
    json voxels = json::array();
    for (const auto& [c, id] : grid.cells) {
        voxels.push_back(
            {{"x", c.x}, {"y", c.y}, {"z", c.z}, {"id", id}});
    }
    json j{{"dim", grid.dim}, {"voxels", std::move(voxels)}};
    out << j.dump() << "\n";
}

VoxelGrid read_voxel_json(std::istream& in) {
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("dim") ||
        !j.contains("voxels") || !j["voxels"].is_array())
        fail(ErrorKind::Data, "malformed voxel JSON");
    VoxelGrid grid;
    grid.dim = j["dim"].get<int>();
    for (const auto& v : j["voxels"]) {
        Coord c{v.at("x").get<std::int16_t>(), v.at("y").get<std::int16_t>(),
                v.at("z").get<std::int16_t>()};
        if (c.is_pad() || c.x >= grid.dim || c.y >= grid.dim ||
            c.z >= grid.dim)
            fail(ErrorKind::Data, "voxel coordinate out of range");
        grid.cells[c] = v.at("id").get<int>();
    }
    return grid;
}

namespace {

void put_u16(std::ostream& out, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

std::uint16_t get_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_voxel_scfd(const VoxelGrid& grid, std::ostream& out) {
    out.write("SCFD", 4);
    put_u32(out, static_cast<std::uint32_t>(grid.dim));
    put_u32(out, static_cast<std::uint32_t>(grid.cells.size()));
    for (const auto& [c, id] : grid.cells) {
        put_u16(out, static_cast<std::uint16_t>(c.x));
        put_u16(out, static_cast<std::uint16_t>(c.y));
        put_u16(out, static_cast<std::uint16_t>(c.z));
        put_u16(out, static_cast<std::uint16_t>(id));
    }
}

VoxelGrid read_voxel_scfd(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SCFD", 4) != 0)
        fail(ErrorKind::Data, "bad SCFD magic");
    VoxelGrid grid;
    grid.dim = static_cast<int>(get_u32(in));
    std::uint32_t count = get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        Coord c;
        c.x = static_cast<std::int16_t>(get_u16(in));
        c.y = static_cast<std::int16_t>(get_u16(in));
        c.z = static_cast<std::int16_t>(get_u16(in));
        int id = get_u16(in);
        if (!in) fail(ErrorKind::Data, "truncated SCFD file");
        grid.cells[c] = id;
    }
    return grid;
}

void write_occupancy_json(const OccupancyMap& occ, std::ostream& out) {
    json cells = json::array();
    for (const auto& c : occ.occupied)
        cells.push_back({c.x, c.y, c.z});
    json j{{"dim", occ.dim}, {"occupied", std::move(cells)}};
    out << j.dump() << "\n";
}

OccupancyMap read_occupancy_json(std::istream& in) {
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("dim") ||
        !j.contains("occupied") || !j["occupied"].is_array())
        fail(ErrorKind::Data, "malformed occupancy JSON");
    OccupancyMap occ;
    occ.dim = j["dim"].get<int>();
    for (const auto& v : j["occupied"]) {
        if (!v.is_array() || v.size() != 3)
            fail(ErrorKind::Data, "occupancy entry is not [x,y,z]");
        Coord c{v[0].get<std::int16_t>(), v[1].get<std::int16_t>(),
                v[2].get<std::int16_t>()};
        if (c.is_pad() || c.x >= occ.dim || c.y >= occ.dim || c.z >= occ.dim)
            fail(ErrorKind::Data, "occupancy coordinate out of range");
        occ.occupied.push_back(c);
    }
    std::sort(occ.occupied.begin(), occ.occupied.end());
    occ.occupied.erase(std::unique(occ.occupied.begin(), occ.occupied.end()),
                       occ.occupied.end());
    return occ;
}

}  // namespace scaffold
