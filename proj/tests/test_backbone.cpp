#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "scaffold/backbone.hpp"
#include "scaffold/diffusion_engine.hpp"
#include "scaffold/rng.hpp"

using namespace scaffold;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.width = 24;
    cfg.seq_len = 8;
    cfg.v_total = 6;
    cfg.grid_dim = 8;
    cfg.pe_mode = PeMode::Sinusoidal3D;
    cfg.time_conditioning = true;
    return cfg;
}

BatchInput random_input(const BackboneConfig& cfg, int batch, Rng& rng,
                        double mask_frac = 0.5) {
    const SpecialTokens sp = cfg.specials();
    BatchInput in;
    in.batch = batch;
    in.length = cfg.seq_len;
    for (int b = 0; b < batch; ++b) {
        for (int l = 0; l < cfg.seq_len; ++l) {
            if (rng.uniform() < mask_frac) {
                in.tokens.push_back(sp.mask());
            } else {
                in.tokens.push_back(
                    static_cast<int>(rng.uniform() * sp.blocks()));
            }
            in.positions.push_back(
                Coord{static_cast<std::int16_t>(rng.uniform() * cfg.grid_dim),
                      static_cast<std::int16_t>(rng.uniform() * cfg.grid_dim),
                      static_cast<std::int16_t>(rng.uniform() * cfg.grid_dim)});
        }
        in.times.push_back(rng.uniform());
    }
    return in;
}

void randomize(BackboneParams& p, std::uint64_t seed, double scale) {
    Rng rng(seed);
    p.for_each([&](const std::string&, Tensor& t) {
        for (double& v : t.data) v = scale * rng.normal();
    });
}

struct SequenceBatch {
    std::vector<TokenSequence> seqs;
};

SequenceBatch random_sequences(const BackboneConfig& cfg, int batch,
                               Rng& rng) {
    const SpecialTokens sp = cfg.specials();
    SequenceBatch out;
    for (int b = 0; b < batch; ++b) {
        TokenSequence seq;
        const std::size_t k =
            1 + static_cast<std::size_t>(rng.uniform() * cfg.seq_len);
        for (int l = 0; l < cfg.seq_len; ++l) {
            if (l < static_cast<int>(k)) {
                seq.tokens.push_back(
                    static_cast<int>(rng.uniform() * sp.blocks()));
                seq.positions.push_back(Coord{
                    static_cast<std::int16_t>(rng.uniform() * cfg.grid_dim),
                    static_cast<std::int16_t>(rng.uniform() * cfg.grid_dim),
                    static_cast<std::int16_t>(rng.uniform() * cfg.grid_dim)});
            } else {
                seq.tokens.push_back(sp.pad());
                seq.positions.push_back(pad_coord());
            }
        }
        seq.active = k;
        out.seqs.push_back(std::move(seq));
    }
    return out;
}

}  // namespace

TEST_CASE("3d encoding at the origin interleaves sin(0), cos(0)") {
    const int width = 24;
    std::vector<double> out(width);
    positional_encoding_3d(Coord{0, 0, 0}, width, 8, out.data());
    for (int i = 0; i < width; i += 2) {
        CHECK(out[i] == 0.0);
        CHECK(out[i + 1] == 1.0);
    }
}

TEST_CASE("3d encoding maps the PAD sentinel to zero") {
    std::vector<double> out(24, 7.0);
    positional_encoding_3d(pad_coord(), 24, 8, out.data());
    for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("3d encoding contract checks") {
    std::vector<double> out(64);
    CHECK_THROWS_AS(positional_encoding_3d(Coord{0, 0, 0}, 20, 8, out.data()),
                    ScaffoldError);
    CHECK_THROWS_AS(positional_encoding_3d(Coord{9, 0, 0}, 24, 8, out.data()),
                    ScaffoldError);
}

TEST_CASE("all 32^3 encodings at width 96 are pairwise distinct") {
    const int width = 96, dim = 32;
    std::vector<std::vector<double>> encs;
    encs.reserve(dim * dim * dim);
    std::vector<double> buf(width);
    for (int x = 0; x < dim; ++x)
        for (int y = 0; y < dim; ++y)
            for (int z = 0; z < dim; ++z) {
                positional_encoding_3d(Coord{static_cast<std::int16_t>(x),
                                             static_cast<std::int16_t>(y),
                                             static_cast<std::int16_t>(z)},
                                       width, dim, buf.data());
                encs.push_back(buf);
            }
    std::sort(encs.begin(), encs.end());
    CHECK(std::adjacent_find(encs.begin(), encs.end()) == encs.end());
}

TEST_CASE("time features distinguish the endpoints") {
    std::vector<double> a(24), b(24);
    time_features(0.0, 24, a.data());
    time_features(1.0, 24, b.data());
    CHECK(a != b);
}

TEST_CASE("forward is deterministic given the init seed") {
    BackboneConfig cfg = tiny_config();
    Backbone net1(cfg, 99), net2(cfg, 99);

    bool all_equal = true;
    auto p1 = [&] {
        std::vector<double> flat;
        net1.params().for_each([&](const std::string&, const Tensor& t) {
            flat.insert(flat.end(), t.data.begin(), t.data.end());
        });
        return flat;
    }();
    auto p2 = [&] {
        std::vector<double> flat;
        net2.params().for_each([&](const std::string&, const Tensor& t) {
            flat.insert(flat.end(), t.data.begin(), t.data.end());
        });
        return flat;
    }();
    CHECK(p1 == p2);

    Rng rng(1);
    BatchInput in = random_input(cfg, 2, rng);
    Workspace ws1, ws2;
    net1.forward(net1.params(), in, ws1);
    net2.forward(net2.params(), in, ws2);
    for (std::size_t i = 0; i < ws1.probs.numel(); ++i)
        all_equal = all_equal && ws1.probs[i] == ws2.probs[i];
    CHECK(all_equal);
}

TEST_CASE("output distributions: rows sum to 1, MASK never predicted, "
          "carry-over slots are point masses") {
    BackboneConfig cfg = tiny_config();
    Backbone net(cfg, 7);
    randomize(net.params(), 123, 0.1);
    const SpecialTokens sp = cfg.specials();

    Rng rng(2);
    BatchInput in = random_input(cfg, 3, rng);
    Workspace ws;
    net.forward(net.params(), in, ws);

    const int V = cfg.v_total;
    for (int idx = 0; idx < in.batch * in.length; ++idx) {
        const double* pr = ws.probs.ptr() + static_cast<std::size_t>(idx) * V;
        double sum = std::accumulate(pr, pr + V, 0.0);
        CHECK(std::abs(sum - 1.0) < 1e-6);
        CHECK(pr[sp.mask()] == 0.0);
        if (in.tokens[idx] != sp.mask()) {
            CHECK(pr[in.tokens[idx]] == 1.0);
        } else {
            for (int v = 0; v < V; ++v)
                if (v != sp.mask()) CHECK(pr[v] > 0.0);
        }
    }
}

TEST_CASE("an unmasked input reproduces itself exactly for any parameters") {
    BackboneConfig cfg = tiny_config();
    Backbone net(cfg, 3);
    randomize(net.params(), 77, 0.3);

    Rng rng(3);
    BatchInput in = random_input(cfg, 2, rng, /*mask_frac=*/0.0);
    Workspace ws;
    net.forward(net.params(), in, ws);
    for (int idx = 0; idx < in.batch * in.length; ++idx) {
        const double* pr =
            ws.probs.ptr() + static_cast<std::size_t>(idx) * cfg.v_total;
        CHECK(pr[in.tokens[idx]] == 1.0);
    }
}

TEST_CASE("without time conditioning the output ignores t") {
    BackboneConfig cfg = tiny_config();
    cfg.time_conditioning = false;
    Backbone net(cfg, 5);
    randomize(net.params(), 11, 0.1);

    Rng rng(4);
    BatchInput in = random_input(cfg, 2, rng);
    Workspace ws1, ws2;
    net.forward(net.params(), in, ws1);
    Tensor first = ws1.probs;
    for (auto& t : in.times) t = 0.123;
    net.forward(net.params(), in, ws2);
    CHECK(first.data == ws2.probs.data);
}

TEST_CASE("zero-initialized modulation equals the unconditioned build") {
    BackboneConfig on = tiny_config();
    BackboneConfig off = tiny_config();
    off.time_conditioning = false;

    Backbone net_on(on, 21);
    Backbone net_off(off, 22);

    // randomize everything except the modulation path, which stays at its
    // zero init; then share the common weights with the unconditioned build
    randomize(net_on.params(), 44, 0.1);
    net_on.params().for_each([&](const std::string& name, Tensor& t) {
        if (name.find("adaln") != std::string::npos) t.zero();
    });
    std::map<std::string, const Tensor*> src;
    net_on.params().for_each([&](const std::string& name, const Tensor& t) {
        src[name] = &t;
    });
    net_off.params().for_each([&](const std::string& name, Tensor& t) {
        auto it = src.find(name);
        REQUIRE(it != src.end());
        t.data = it->second->data;
    });

    Rng rng(5);
    BatchInput in = random_input(on, 2, rng);
    Workspace ws_on, ws_off;
    net_on.forward(net_on.params(), in, ws_on);
    net_off.forward(net_off.params(), in, ws_off);
    CHECK(ws_on.logits.data == ws_off.logits.data);
}

TEST_CASE("permuting slots together with positions permutes the outputs") {
    BackboneConfig cfg = tiny_config();
    Backbone net(cfg, 6);
    randomize(net.params(), 55, 0.1);

    Rng rng(6);
    BatchInput in = random_input(cfg, 1, rng);
    Workspace ws;
    net.forward(net.params(), in, ws);
    Tensor base = ws.probs;

    std::vector<int> perm(cfg.seq_len);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t j = perm.size(); j-- > 1;) {
        std::size_t pick = static_cast<std::size_t>(rng.uniform() * (j + 1));
        std::swap(perm[j], perm[pick]);
    }

    BatchInput permuted = in;
    for (int l = 0; l < cfg.seq_len; ++l) {
        permuted.tokens[l] = in.tokens[perm[l]];
        permuted.positions[l] = in.positions[perm[l]];
    }
    net.forward(net.params(), permuted, ws);

    const int V = cfg.v_total;
    for (int l = 0; l < cfg.seq_len; ++l)
        for (int v = 0; v < V; ++v)
            CHECK(ws.probs[static_cast<std::size_t>(l) * V + v] ==
                  doctest::Approx(base[static_cast<std::size_t>(perm[l]) * V + v])
                      .epsilon(1e-9));
}

TEST_CASE("causal attention never looks ahead") {
    BackboneConfig cfg = tiny_config();
    cfg.causal = true;
    cfg.time_conditioning = false;
    Backbone net(cfg, 8);
    randomize(net.params(), 88, 0.1);

    Rng rng(7);
    BatchInput in = random_input(cfg, 1, rng, 0.0);
    Workspace ws;
    net.forward(net.params(), in, ws);
    Tensor base = ws.logits;

    const int split = 4;
    BatchInput altered = in;
    for (int l = split; l < cfg.seq_len; ++l) altered.tokens[l] = 0;
    net.forward(net.params(), altered, ws);
    const int V = cfg.v_total;
    for (int l = 0; l < split; ++l)
        for (int v = 0; v < V; ++v)
            CHECK(ws.logits[static_cast<std::size_t>(l) * V + v] ==
                  base[static_cast<std::size_t>(l) * V + v]);
}

TEST_CASE("learned positional table: distinct rows at init, lookups repeat") {
    BackboneConfig cfg = tiny_config();
    cfg.pe_mode = PeMode::LearnedSlot;
    Backbone net(cfg, 9);
    const Tensor& table = net.params().pe_table;
    REQUIRE(table.shape[0] == static_cast<std::size_t>(cfg.seq_len));
    for (int r = 1; r < cfg.seq_len; ++r) {
        bool same = true;
        for (int j = 0; j < cfg.width; ++j)
            same = same && table[static_cast<std::size_t>(r) * cfg.width + j] ==
                               table[j];
        CHECK(!same);
    }
}

TEST_CASE("learned positional table receives gradient only at visited rows") {
    BackboneConfig cfg = tiny_config();
    cfg.pe_mode = PeMode::LearnedCoord;
    cfg.grid_dim = 4;
    Backbone net(cfg, 10);
    randomize(net.params(), 99, 0.05);

    const SpecialTokens sp = cfg.specials();
    BatchInput in;
    in.batch = 1;
    in.length = 4;
    in.tokens = {sp.mask(), sp.mask(), 0, sp.pad()};
    in.positions = {Coord{0, 0, 0}, Coord{1, 2, 3}, Coord{3, 3, 3},
                    pad_coord()};
    in.times = {0.5};

    Workspace ws;
    net.forward(net.params(), in, ws);
    Tensor dlogits;
    dlogits.reset({1, 4, static_cast<std::size_t>(cfg.v_total)});
    for (auto& v : dlogits.data) v = 0.01;
    BackboneParams grads;
    grads.init_shapes(cfg);
    grads.zero();
    net.backward(net.params(), in, dlogits, ws, grads);

    const int D = cfg.grid_dim;
    auto row_norm = [&](int x, int y, int z) {
        double s = 0.0;
        const std::size_t key = (static_cast<std::size_t>(x) * D + y) * D + z;
        for (int j = 0; j < cfg.width; ++j) {
            double v = grads.pe_table[key * cfg.width + j];
            s += v * v;
        }
        return s;
    };
    CHECK(row_norm(0, 0, 0) > 0.0);
    CHECK(row_norm(1, 2, 3) > 0.0);
    CHECK(row_norm(3, 3, 3) > 0.0);
    CHECK(row_norm(2, 2, 2) == 0.0);
    CHECK(row_norm(0, 0, 1) == 0.0);
}

TEST_CASE("non-finite parameters are reported with the failing layer") {
    BackboneConfig cfg = tiny_config();
    Backbone net(cfg, 12);
    net.params().blocks[1].fc2_w[0] = std::numeric_limits<double>::infinity();
    Rng rng(8);
    BatchInput in = random_input(cfg, 1, rng);
    Workspace ws;
    try {
        net.forward(net.params(), in, ws);
        FAIL("expected a numeric error");
    } catch (const ScaffoldError& e) {
        CHECK(e.kind() == ErrorKind::Numeric);
        CHECK(std::string(e.what()).find("block 1") != std::string::npos);
    }
}

namespace {

// Deterministic training loss of the parameters for the gradient checks:
// fixed seed/step pins the corruption pattern and diffusion times.
double loss_of(Backbone& net, const std::vector<TokenSequence>& batch,
               Workspace& ws, BackboneParams& scratch, LossMode mode) {
    scratch.zero();
    const NoiseSchedule sched{1e-3};
    LossOptions opts;
    opts.fixed_t = 0.6;
    return train_loss_and_grad(batch, net, sched, mode, 16, /*seed=*/4242,
                               /*step=*/17, ws, scratch, opts)
        .loss;
}

void gradient_check(BackboneConfig cfg, LossMode mode, double tol) {
    Backbone net(cfg, 31);
    randomize(net.params(), 313, 0.05);

    Rng rng(9);
    SequenceBatch batch = random_sequences(cfg, 2, rng);

    Workspace ws;
    BackboneParams grads, scratch;
    grads.init_shapes(cfg);
    grads.zero();
    scratch.init_shapes(cfg);

    const NoiseSchedule sched{1e-3};
    LossOptions opts;
    opts.fixed_t = 0.6;
    train_loss_and_grad(batch.seqs, net, sched, mode, 16, 4242, 17, ws, grads,
                        opts);

    std::vector<Tensor*> ptensors, gtensors;
    net.params().for_each(
        [&](const std::string&, Tensor& t) { ptensors.push_back(&t); });
    grads.for_each(
        [&](const std::string&, Tensor& t) { gtensors.push_back(&t); });

    double max_rel = 0.0;
    std::size_t checked = 0;
    Rng pick(10);
    for (std::size_t ti = 0; ti < ptensors.size(); ++ti) {
        Tensor& t = *ptensors[ti];
        // probe a subset of each tensor; small tensors in full
        const std::size_t probes = std::min<std::size_t>(t.numel(), 24);
        auto central = [&](std::size_t e, double saved, double h) {
            t[e] = saved + h;
            const double lp = loss_of(net, batch.seqs, ws, scratch, mode);
            t[e] = saved - h;
            const double lm = loss_of(net, batch.seqs, ws, scratch, mode);
            t[e] = saved;
            return (lp - lm) / (2 * h);
        };
        for (std::size_t pi = 0; pi < probes; ++pi) {
            const std::size_t e =
                probes == t.numel()
                    ? pi
                    : static_cast<std::size_t>(pick.uniform() * t.numel());
            const double saved = t[e];
            const double h = 4e-5 * std::max(1.0, std::abs(saved));
            // Richardson-extrapolated central difference
            const double d1 = central(e, saved, h);
            const double d2 = central(e, saved, h / 2);
            const double numeric = (4.0 * d2 - d1) / 3.0;
            const double analytic = gtensors[ti]->data[e];
            const double denom = std::max(std::abs(numeric), std::abs(analytic));
            if (denom < 1e-6) continue;  // below the FD noise floor
            max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
            ++checked;
        }
    }
    CHECK(checked > 200);
    CHECK(max_rel < tol);
}

}  // namespace

TEST_CASE("analytic gradients match finite differences (diffusion loss)") {
    gradient_check(tiny_config(), LossMode::Continuous, 1e-4);
}

TEST_CASE("analytic gradients match finite differences (causal loss)") {
    BackboneConfig cfg = tiny_config();
    cfg.causal = true;
    cfg.time_conditioning = false;
    gradient_check(cfg, LossMode::Autoregressive, 1e-4);
}

TEST_CASE("analytic gradients match finite differences (learned table)") {
    BackboneConfig cfg = tiny_config();
    cfg.pe_mode = PeMode::LearnedSlot;
    gradient_check(cfg, LossMode::Continuous, 1e-4);
}
