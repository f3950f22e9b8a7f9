#include "scaffold/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace scaffold {

namespace {

constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void put_u8(std::ostream& out, std::uint8_t v) {
    out.put(static_cast<char>(v));
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint8_t get_u8(std::istream& in) {
    return static_cast<std::uint8_t>(in.get());
}

void put_array(std::ostream& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u8(out, 0);  // dtype tag 0 = f64
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

struct RawArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

std::map<std::string, RawArray> read_arrays(std::istream& in,
                                            std::uint32_t count) {
    std::map<std::string, RawArray> arrays;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint8_t dtype = get_u8(in);
        if (dtype != 0) fail(ErrorKind::Data, "unsupported dtype in checkpoint");
        std::uint32_t rank = get_u32(in);
        RawArray arr;
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            std::size_t d = get_u32(in);
            arr.shape.push_back(d);
            n *= d;
        }
        arr.data.resize(n);
        in.read(reinterpret_cast<char*>(arr.data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) fail(ErrorKind::Data, "truncated checkpoint array " + name);
        arrays.emplace(std::move(name), std::move(arr));
    }
    return arrays;
}

void load_into(BackboneParams& dst, const std::string& prefix,
               std::map<std::string, RawArray>& arrays) {
    dst.for_each([&](const std::string& name, Tensor& t) {
        auto it = arrays.find(prefix + name);
        if (it == arrays.end())
            fail(ErrorKind::Data, "checkpoint missing array " + prefix + name);
        if (it->second.data.size() != t.numel())
            fail(ErrorKind::Data, "checkpoint array " + prefix + name +
                                      " has wrong size");
        t.data = std::move(it->second.data);
        arrays.erase(it);
    });
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    namespace fs = std::filesystem;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot open " + tmp + " for writing");

        out.write("SCKP", 4);
        put_u32(out, kVersion);
        const auto& c = ckpt.config;
        put_u32(out, static_cast<std::uint32_t>(c.depth));
        put_u32(out, static_cast<std::uint32_t>(c.heads));
        put_u32(out, static_cast<std::uint32_t>(c.width));
        put_u32(out, static_cast<std::uint32_t>(c.seq_len));
        put_u32(out, static_cast<std::uint32_t>(c.v_total));
        put_u32(out, static_cast<std::uint32_t>(c.grid_dim));
        put_u8(out, static_cast<std::uint8_t>(c.pe_mode));
        put_u8(out, c.time_conditioning ? 1 : 0);
        put_u8(out, c.causal ? 1 : 0);

        std::uint32_t count = 0;
        ckpt.params.for_each([&](const std::string&, const Tensor&) { ++count; });
        count *= 4;  // params + ema + opt.m + opt.v
        count += 2;  // vocab/block_ids + meta/train
        put_u32(out, count);

        ckpt.params.for_each([&](const std::string& name, const Tensor& t) {
            put_array(out, name, t);
        });
        ckpt.ema.for_each([&](const std::string& name, const Tensor& t) {
            put_array(out, "ema/" + name, t);
        });
        ckpt.opt.m.for_each([&](const std::string& name, const Tensor& t) {
            put_array(out, "opt/m/" + name, t);
        });
        ckpt.opt.v.for_each([&](const std::string& name, const Tensor& t) {
            put_array(out, "opt/v/" + name, t);
        });

        Tensor vocab_ids;
        vocab_ids.reset({ckpt.vocab.block_ids().size()});
        for (std::size_t i = 0; i < ckpt.vocab.block_ids().size(); ++i)
            vocab_ids[i] = ckpt.vocab.block_ids()[i];
        put_array(out, "vocab/block_ids", vocab_ids);

        Tensor meta;
        meta.reset({4});
        meta[0] = static_cast<double>(ckpt.opt.step);
        meta[1] = static_cast<double>(ckpt.seed & 0xffffffffull);
        meta[2] = static_cast<double>(ckpt.seed >> 32);
        meta[3] = ckpt.schedule_eps;
        put_array(out, "meta/train", meta);

        if (!out) fail(ErrorKind::Io, "write failed for " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        fail(ErrorKind::Io, "cannot move checkpoint into place: " + ec.message());
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path);

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SCKP", 4) != 0)
        fail(ErrorKind::Data, "bad checkpoint magic in " + path);
    std::uint32_t version = get_u32(in);
    if (version != kVersion)
        fail(ErrorKind::Data, "unsupported checkpoint version " +
                                  std::to_string(version));

    Checkpoint ckpt;
    auto& c = ckpt.config;
    c.depth = static_cast<int>(get_u32(in));
    c.heads = static_cast<int>(get_u32(in));
    c.width = static_cast<int>(get_u32(in));
    c.seq_len = static_cast<int>(get_u32(in));
    c.v_total = static_cast<int>(get_u32(in));
    c.grid_dim = static_cast<int>(get_u32(in));
    c.pe_mode = static_cast<PeMode>(get_u8(in));
    c.time_conditioning = get_u8(in) != 0;
    c.causal = get_u8(in) != 0;
    c.validate();

    std::uint32_t count = get_u32(in);
    auto arrays = read_arrays(in, count);

    ckpt.params.init_shapes(c);
    ckpt.ema.init_shapes(c);
    ckpt.opt.init_shapes(c);
    load_into(ckpt.params, "", arrays);
    load_into(ckpt.ema, "ema/", arrays);
    load_into(ckpt.opt.m, "opt/m/", arrays);
    load_into(ckpt.opt.v, "opt/v/", arrays);

    auto vit = arrays.find("vocab/block_ids");
    if (vit == arrays.end())
        fail(ErrorKind::Data, "checkpoint missing vocab/block_ids");
    std::vector<int> ids;
    ids.reserve(vit->second.data.size());
    for (double d : vit->second.data) ids.push_back(static_cast<int>(d));
    ckpt.vocab = Vocabulary(std::move(ids));
    if (ckpt.vocab.total() != c.v_total)
        fail(ErrorKind::Data, "checkpoint vocabulary does not match v_total");

    auto mit = arrays.find("meta/train");
    if (mit == arrays.end() || mit->second.data.size() != 4)
        fail(ErrorKind::Data, "checkpoint missing meta/train");
    ckpt.opt.step = static_cast<std::uint64_t>(mit->second.data[0]);
    ckpt.seed = static_cast<std::uint64_t>(mit->second.data[1]) |
                (static_cast<std::uint64_t>(mit->second.data[2]) << 32);
    ckpt.schedule_eps = mit->second.data[3];

    return ckpt;
}

}  // namespace scaffold
