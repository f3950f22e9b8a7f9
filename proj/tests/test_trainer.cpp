#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "scaffold/synthetic.hpp"
#include "scaffold/trainer.hpp"

using namespace scaffold;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny_config(int v_total, bool causal = false) {
    BackboneConfig cfg;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.width = 12;
    cfg.seq_len = 8;
    cfg.v_total = v_total;
    cfg.grid_dim = 8;
    cfg.causal = causal;
    cfg.time_conditioning = !causal;
    return cfg;
}

std::vector<TokenSequence> tiny_dataset(const Vocabulary& vocab,
                                        std::size_t seq_len, std::size_t n,
                                        std::uint64_t seed) {
    auto grids = make_parity_houses(n, 4, 2, 6, seed);
    std::vector<TokenSequence> out;
    for (auto& g : grids) {
        for (auto& [c, id] : g.cells) id = 1 + id % vocab.size();
        out.push_back(extract_sequence(g, seq_len, vocab));
    }
    return out;
}

std::string temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("scaffold_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::vector<double> flatten(const BackboneParams& p) {
    std::vector<double> out;
    p.for_each([&](const std::string&, const Tensor& t) {
        out.insert(out.end(), t.data.begin(), t.data.end());
    });
    return out;
}

}  // namespace

TEST_CASE("warmup ramps linearly then holds") {
    AdamConfig cfg;
    cfg.lr = 3e-4;
    cfg.warmup_steps = 2500;
    CHECK(warmup_lr(cfg, 1250) == doctest::Approx(1.5e-4).epsilon(1e-12));
    CHECK(warmup_lr(cfg, 2500) == 3e-4);
    CHECK(warmup_lr(cfg, 100000) == 3e-4);
    double prev = 0.0;
    for (std::uint64_t s = 1; s <= 3000; s += 50) {
        double lr = warmup_lr(cfg, s);
        CHECK(lr >= prev);
        prev = lr;
    }
    cfg.warmup_steps = 0;
    CHECK(warmup_lr(cfg, 1) == 3e-4);
}

TEST_CASE("zero gradients with zero weight decay leave parameters alone") {
    BackboneConfig cfg = tiny_config(5);
    Backbone net(cfg, 1);
    BackboneParams grads;
    grads.init_shapes(cfg);
    grads.zero();
    OptimizerState state;
    state.init_shapes(cfg);
    AdamConfig adam;
    adam.warmup_steps = 0;

    auto before = flatten(net.params());
    const double norm = optimizer_step(net.params(), grads, state, adam);
    CHECK(norm == 0.0);
    CHECK(flatten(net.params()) == before);
    CHECK(state.step == 1);
}

TEST_CASE("first Adam update is approximately -lr * sign(g)") {
    BackboneConfig cfg = tiny_config(5);
    Backbone net(cfg, 2);
    BackboneParams grads;
    grads.init_shapes(cfg);
    grads.zero();
    OptimizerState state;
    state.init_shapes(cfg);
    AdamConfig adam;
    adam.lr = 1e-2;
    adam.warmup_steps = 0;

    const double g = 0.37;
    grads.tok_emb[5] = g;
    const double before = net.params().tok_emb[5];
    optimizer_step(net.params(), grads, state, adam);
    // mhat = g, vhat = g^2  =>  delta = -lr * g / (|g| + eps)
    const double want = -adam.lr * g / (std::abs(g) + adam.eps);
    CHECK(net.params().tok_emb[5] - before ==
          doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("weight decay is decoupled") {
    BackboneConfig cfg = tiny_config(5);
    Backbone net(cfg, 3);
    net.params().tok_emb[0] = 2.0;
    BackboneParams grads;
    grads.init_shapes(cfg);
    grads.zero();
    OptimizerState state;
    state.init_shapes(cfg);
    AdamConfig adam;
    adam.lr = 0.1;
    adam.weight_decay = 0.5;
    adam.warmup_steps = 0;

    optimizer_step(net.params(), grads, state, adam);
    // zero gradient: the only movement is -lr * wd * theta
    CHECK(net.params().tok_emb[0] ==
          doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-12));
}

TEST_CASE("non-finite gradients abort the step and name the tensor") {
    BackboneConfig cfg = tiny_config(5);
    Backbone net(cfg, 4);
    BackboneParams grads;
    grads.init_shapes(cfg);
    grads.zero();
    grads.blocks[0].qkv_w[3] = std::nan("");
    OptimizerState state;
    state.init_shapes(cfg);
    AdamConfig adam;

    auto before = flatten(net.params());
    try {
        optimizer_step(net.params(), grads, state, adam);
        FAIL("expected a numeric error");
    } catch (const ScaffoldError& e) {
        CHECK(e.kind() == ErrorKind::Numeric);
        CHECK(std::string(e.what()).find("qkv.w") != std::string::npos);
    }
    CHECK(flatten(net.params()) == before);
    CHECK(state.step == 0);
}

TEST_CASE("ema_update endpoints and geometric decay") {
    BackboneConfig cfg = tiny_config(5);
    Backbone net(cfg, 5);
    BackboneParams shadow = net.params();
    net.params().tok_emb[0] = 1.5;
    shadow.tok_emb[0] = 0.5;

    BackboneParams s0 = shadow;
    ema_update(net.params(), s0, 0.0);
    CHECK(s0.tok_emb[0] == 1.5);  // decay 0 copies the parameters

    BackboneParams s1 = shadow;
    ema_update(net.params(), s1, 1.0);
    CHECK(s1.tok_emb[0] == 0.5);  // decay 1 never moves

    // constant params p from shadow s0: after n steps, p + (s0-p)*decay^n
    const double decay = 0.9, p = 1.5, start = 0.5;
    BackboneParams s = shadow;
    for (int n = 1; n <= 20; ++n) {
        ema_update(net.params(), s, decay);
        CHECK(s.tok_emb[0] ==
              doctest::Approx(p + (start - p) * std::pow(decay, n))
                  .epsilon(1e-12));
    }
}

TEST_CASE("ema stays between the old shadow and the parameters") {
    BackboneConfig cfg = tiny_config(5);
    Backbone net(cfg, 6);
    Rng rng(1);
    net.params().for_each([&](const std::string&, Tensor& t) {
        for (double& v : t.data) v = rng.normal();
    });
    BackboneParams shadow = net.params();
    shadow.for_each([&](const std::string&, Tensor& t) {
        for (double& v : t.data) v += 0.1 * rng.normal();
    });
    BackboneParams before = shadow;
    ema_update(net.params(), shadow, 0.99);
    auto p = flatten(net.params());
    auto lo = flatten(before);
    auto cur = flatten(shadow);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double a = std::min(lo[i], p[i]), b = std::max(lo[i], p[i]);
        CHECK(cur[i] >= a - 1e-15);
        CHECK(cur[i] <= b + 1e-15);
    }
}

TEST_CASE("gradient clipping rescales to the requested norm") {
    BackboneConfig cfg = tiny_config(5);
    BackboneParams grads;
    grads.init_shapes(cfg);
    grads.zero();
    grads.tok_emb[0] = 3.0;
    grads.tok_emb[1] = 4.0;
    const double norm = clip_gradients(grads, 1.0);
    CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(grads.tok_emb[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(grads.tok_emb[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("config parsing: dotted keys, comments, errors") {
    Config cfg = Config::parse_string(
        "train.lr = 3e-4\n"
        "# a comment\n"
        "model.depth=12   # trailing comment\n"
        "train.loss=continuous\n"
        "flag.on = true\n");
    CHECK(cfg.get_double("train.lr", 0.0) == 3e-4);
    CHECK(cfg.get_int("model.depth", 0) == 12);
    CHECK(cfg.get_string("train.loss", "") == "continuous");
    CHECK(cfg.get_bool("flag.on", false));
    CHECK(cfg.get_int("train.max_steps", 123) == 123);
    CHECK(cfg.get_int("absent", 7) == 7);

    CHECK_THROWS_AS(Config::parse_string("not a key value"), ScaffoldError);
    CHECK_THROWS_AS(Config::parse_string("a=b\n=c\n"), ScaffoldError);
    Config bad = Config::parse_string("x=abc\n");
    CHECK_THROWS_AS(bad.get_double("x", 0.0), ScaffoldError);

    Config sci = Config::parse_string("train.max_steps=1e6\n");
    CHECK(sci.get_int("train.max_steps", 0) == 1000000);
}

TEST_CASE("train/backbone configs pick up defaults and overrides") {
    Config cfg = Config::parse_string(
        "model.depth=4\nmodel.width=120\nmodel.heads=12\nmodel.seq_len=64\n"
        "data.dim=8\ntrain.loss=autoregressive\ntrain.lr=1e-3\n");
    BackboneConfig bc = backbone_config_from(cfg, 7);
    CHECK(bc.depth == 4);
    CHECK(bc.width == 120);
    CHECK(bc.seq_len == 64);
    CHECK(bc.grid_dim == 8);
    CHECK(bc.causal);
    CHECK(!bc.time_conditioning);
    TrainConfig tc = train_config_from(cfg);
    CHECK(tc.adam.lr == 1e-3);
    CHECK(tc.loss_mode == LossMode::Autoregressive);
    CHECK(tc.adam.warmup_steps == 2500);
    CHECK(tc.ema_decay == 0.9999);
}

TEST_CASE("epoch permutations visit every sequence exactly once") {
    const std::size_t n = 17;
    for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
        std::set<std::size_t> seen;
        for (std::size_t i = 0; i < n; ++i)
            seen.insert(batch_index(9, n, epoch * n + i));
        CHECK(seen.size() == n);
    }
    CHECK(batch_index(9, n, 5) == batch_index(9, n, 5));
    // different epochs shuffle differently
    bool any_diff = false;
    for (std::size_t i = 0; i < n; ++i)
        any_diff = any_diff || batch_index(9, n, i) != batch_index(9, n, n + i);
    CHECK(any_diff);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    BackboneConfig cfg = tiny_config(7);
    Backbone net(cfg, 7);
    OptimizerState state;
    state.init_shapes(cfg);
    state.step = 123;
    Rng rng(2);
    state.m.for_each([&](const std::string&, Tensor& t) {
        for (double& v : t.data) v = rng.normal();
    });

    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.params = net.params();
    ckpt.ema = net.ema();
    ckpt.opt = state;
    ckpt.vocab = Vocabulary({3, 9, 27, 81});
    ckpt.seed = 42;
    ckpt.schedule_eps = 1e-3;

    const std::string dir = temp_dir("ckpt");
    const std::string path = dir + "/model.sckp";
    save_checkpoint(ckpt, path);
    Checkpoint back = load_checkpoint(path);

    CHECK(back.config.depth == cfg.depth);
    CHECK(back.config.v_total == cfg.v_total);
    CHECK(back.config.pe_mode == cfg.pe_mode);
    CHECK(flatten(back.params) == flatten(net.params()));
    CHECK(flatten(back.ema) == flatten(net.ema()));
    CHECK(flatten(back.opt.m) == flatten(state.m));
    CHECK(back.opt.step == 123);
    CHECK(back.vocab.block_ids() == std::vector<int>{3, 9, 27, 81});
    CHECK(back.seed == 42);
    CHECK(back.schedule_eps == 1e-3);

    CHECK_THROWS_AS(load_checkpoint(dir + "/missing.sckp"), ScaffoldError);
}

TEST_CASE("a fresh model starts near the uniform baseline loss") {
    Vocabulary vocab({1, 2, 3, 4});
    BackboneConfig cfg = tiny_config(vocab.total());
    cfg.seq_len = 16;
    Backbone net(cfg, 8);  // zero head: uniform over the 6 non-MASK tokens
    BackboneDenoiser model(net, net.params());
    const NoiseSchedule sched{1e-3};

    auto dataset = tiny_dataset(vocab, 16, 8, 11);
    double sum = 0.0;
    const int draws = 400;
    for (int d = 0; d < draws; ++d)
        sum += loss_continuous(dataset, model, sched, 5, d).loss;
    const double want = (1.0 - 1e-3) * std::log(vocab.total() - 1.0);
    CHECK(std::abs(sum / draws - want) < 0.05 * want);
}

TEST_CASE("training runs, logs a curve, and checkpoints") {
    Vocabulary vocab({1, 2, 3, 4});
    BackboneConfig bc = tiny_config(vocab.total());
    Backbone net(bc, 9);
    auto dataset = tiny_dataset(vocab, bc.seq_len, 12, 13);

    TrainConfig tc;
    tc.adam.warmup_steps = 4;
    tc.max_steps = 10;
    tc.batch_size = 4;
    tc.checkpoint_interval = 5;
    tc.seed = 3;
    tc.out_dir = temp_dir("train_smoke");

    TrainResult res = train(dataset, vocab, net, tc);
    CHECK(res.curve.size() == 10);
    for (const auto& pt : res.curve) {
        CHECK(std::isfinite(pt.loss));
        CHECK(pt.loss > 0.0);
        CHECK(pt.grad_norm > 0.0);
    }
    CHECK(res.curve[0].lr == doctest::Approx(tc.adam.lr / 4));
    CHECK(res.curve[9].lr == tc.adam.lr);
    CHECK(fs::exists(res.checkpoint_path));
    CHECK(fs::exists(tc.out_dir + "/loss.csv"));

    std::ifstream csv(tc.out_dir + "/loss.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,loss,lr,grad_norm");
    std::size_t rows = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 10);

    Checkpoint ckpt = load_checkpoint(res.checkpoint_path);
    CHECK(ckpt.opt.step == 10);
    CHECK(flatten(ckpt.params) == flatten(net.params()));
}

TEST_CASE("resuming reproduces an uninterrupted run bit-exactly") {
    Vocabulary vocab({1, 2, 3, 4});
    BackboneConfig bc = tiny_config(vocab.total());
    auto dataset = tiny_dataset(vocab, bc.seq_len, 10, 17);

    TrainConfig tc;
    tc.adam.warmup_steps = 3;
    tc.max_steps = 12;
    tc.batch_size = 3;
    tc.checkpoint_interval = 6;
    tc.seed = 21;

    // uninterrupted run
    tc.out_dir = temp_dir("train_full");
    Backbone net_a(bc, tc.seed);
    TrainResult full = train(dataset, vocab, net_a, tc);

    // interrupted at step 6, then resumed to 12
    tc.out_dir = temp_dir("train_resume");
    Backbone net_b(bc, tc.seed);
    TrainConfig first = tc;
    first.max_steps = 6;
    TrainResult part = train(dataset, vocab, net_b, first);

    Backbone net_c(bc, tc.seed);
    TrainResult rest = train(dataset, vocab, net_c, tc, part.checkpoint_path);

    REQUIRE(full.curve.size() == 12);
    REQUIRE(part.curve.size() == 6);
    REQUIRE(rest.curve.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(full.curve[i].loss == part.curve[i].loss);
        CHECK(full.curve[i].grad_norm == part.curve[i].grad_norm);
    }
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(full.curve[6 + i].loss == rest.curve[i].loss);
        CHECK(full.curve[6 + i].grad_norm == rest.curve[i].grad_norm);
    }
    CHECK(flatten(net_a.params()) == flatten(net_c.params()));
    CHECK(flatten(net_a.ema()) == flatten(net_c.ema()));

    // resuming with a different seed is refused
    TrainConfig wrong = tc;
    wrong.seed = 22;
    Backbone net_d(bc, 22);
    CHECK_THROWS_AS(train(dataset, vocab, net_d, wrong, part.checkpoint_path),
                    ScaffoldError);
}

TEST_CASE("fixed seed gives bit-identical checkpoints") {
    Vocabulary vocab({1, 2, 3, 4});
    BackboneConfig bc = tiny_config(vocab.total());
    auto dataset = tiny_dataset(vocab, bc.seq_len, 8, 19);

    TrainConfig tc;
    tc.adam.warmup_steps = 2;
    tc.max_steps = 8;
    tc.batch_size = 2;
    tc.checkpoint_interval = 100;
    tc.seed = 5;

    tc.out_dir = temp_dir("det_a");
    Backbone a(bc, tc.seed);
    train(dataset, vocab, a, tc);
    tc.out_dir = temp_dir("det_b");
    Backbone b(bc, tc.seed);
    train(dataset, vocab, b, tc);
    CHECK(flatten(a.params()) == flatten(b.params()));
    CHECK(flatten(a.ema()) == flatten(b.ema()));
}

TEST_CASE("the causal baseline memorizes a single-sequence dataset") {
    Vocabulary vocab({1, 2, 3, 4});
    BackboneConfig bc = tiny_config(vocab.total(), /*causal=*/true);
    bc.seq_len = 12;

    auto grids = make_parity_houses(1, 4, 8, 12, 31);
    std::vector<TokenSequence> dataset{
        extract_sequence(grids[0], bc.seq_len, vocab)};

    Backbone net(bc, 23);
    TrainConfig tc;
    tc.adam.warmup_steps = 20;
    tc.adam.lr = 2e-3;
    tc.ema_decay = 0.95;
    tc.max_steps = 900;
    tc.batch_size = 1;
    tc.loss_mode = LossMode::Autoregressive;
    tc.checkpoint_interval = 10000;
    tc.seed = 4;
    tc.out_dir = temp_dir("ar_memorize");
    TrainResult res = train(dataset, vocab, net, tc);

    CHECK(res.curve.front().loss > 0.5);
    CHECK(res.curve.back().loss < 0.02);
    CHECK(loss_autoregressive(dataset, net, net.params()).loss < 0.02);
}

TEST_CASE("greedy causal decoding reproduces a deterministic rule after "
          "training") {
    // 4^3 cube: parity categories are a function of the slot's own
    // position, which the causal model sees when predicting that slot
    auto grids = make_parity_houses(48, 4, 6, 14, 33);
    Vocabulary vocab = Vocabulary::from_grids(grids);
    BackboneConfig bc;
    bc.depth = 2;
    bc.heads = 2;
    bc.width = 24;
    bc.seq_len = 16;
    bc.v_total = vocab.total();
    bc.grid_dim = 4;
    bc.causal = true;
    bc.time_conditioning = false;
    std::vector<TokenSequence> dataset;
    for (const auto& g : grids)
        dataset.push_back(extract_sequence(g, bc.seq_len, vocab));

    Backbone net(bc, 29);
    TrainConfig tc;
    tc.adam.warmup_steps = 30;
    tc.adam.lr = 1e-3;
    tc.ema_decay = 0.97;
    tc.max_steps = 400;
    tc.batch_size = 8;
    tc.loss_mode = LossMode::Autoregressive;
    tc.checkpoint_interval = 1000;
    tc.seed = 6;
    tc.out_dir = temp_dir("ar_rule");
    train(dataset, vocab, net, tc);

    auto held_out = make_parity_houses(8, 4, 6, 14, 34);
    double num = 0.0, den = 0.0;
    for (const auto& g : held_out) {
        VoxelGrid decoded = sample_autoregressive(footprint(g), net,
                                                  net.ema(), vocab, 0.0, 1);
        num += parity_rule_accuracy(decoded) *
               static_cast<double>(decoded.occupied());
        den += static_cast<double>(decoded.occupied());
    }
    CHECK(num / den == 1.0);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    tc.adam.warmup_steps = 100;
    tc.max_steps = 10;
    CHECK_THROWS_AS(tc.validate(), ScaffoldError);
    tc.adam.warmup_steps = 5;
    tc.ema_decay = 1.0;
    CHECK_THROWS_AS(tc.validate(), ScaffoldError);
    tc.ema_decay = 0.999;
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ScaffoldError);
}
