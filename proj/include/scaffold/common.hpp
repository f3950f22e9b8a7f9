#pragma once

#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace scaffold {

enum class ErrorKind {
    Usage,              // bad CLI invocation
    Data,               // malformed records, unreadable files
    StructureTooLarge,  // voxelized extent exceeds the cube
    SequenceOverflow,   // occupied count exceeds sequence length
    IncompleteSample,   // MASK token left in an active slot
    DuplicatePosition,  // two active slots claim the same voxel
    Domain,             // argument outside an operation's contract
    Numeric,            // non-finite value in model math
    Io,                 // filesystem failure
};

class ScaffoldError : public std::runtime_error {
  public:
    ScaffoldError(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw ScaffoldError(kind, msg);
}

// Voxel coordinate. (-1,-1,-1) is the PAD sentinel used in padded token
// sequences; real grid coordinates are always non-negative.
struct Coord {
    std::int16_t x = -1;
    std::int16_t y = -1;
    std::int16_t z = -1;

    bool is_pad() const noexcept { return x < 0 || y < 0 || z < 0; }
    friend bool operator==(const Coord&, const Coord&) = default;
    friend auto operator<=>(const Coord&, const Coord&) = default;
};

inline Coord pad_coord() noexcept { return Coord{-1, -1, -1}; }

// Special token ids live after the |V| block tokens, in the fixed order
// MASK, PAD, BOS. Everything that needs them derives from v_total alone.
struct SpecialTokens {
    int v_total = 0;

    int blocks() const noexcept { return v_total - 3; }  // |V|
    int mask() const noexcept { return v_total - 3; }
    int pad() const noexcept { return v_total - 2; }
    int bos() const noexcept { return v_total - 1; }
    bool is_block(int tok) const noexcept { return tok >= 0 && tok < blocks(); }
};

}  // namespace scaffold
