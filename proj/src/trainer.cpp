#include "scaffold/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "scaffold/rng.hpp"

namespace scaffold {

namespace {

std::vector<Tensor*> collect(BackboneParams& p) {
    std::vector<Tensor*> out;
    p.for_each([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

std::vector<const Tensor*> collect(const BackboneParams& p) {
    std::vector<const Tensor*> out;
    p.for_each([&](const std::string&, const Tensor& t) { out.push_back(&t); });
    return out;
}

std::vector<std::size_t> epoch_permutation(std::uint64_t seed,
                                           std::size_t n,
                                           std::uint64_t epoch) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t j = n; j-- > 1;) {
        const double u = uniform_at(seed, rng_stream::kBatchPerm, epoch,
                                    static_cast<std::uint32_t>(j), 0);
        const std::size_t pick = static_cast<std::size_t>(u * (j + 1));
        std::swap(perm[j], perm[pick]);
    }
    return perm;
}

}  // namespace

double warmup_lr(const AdamConfig& cfg, std::uint64_t step) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_steps);
}

double optimizer_step(BackboneParams& params, const BackboneParams& grads,
                      OptimizerState& state, const AdamConfig& cfg) {
    // Validate every gradient before touching any state.
    double norm_sq = 0.0;
    grads.for_each([&](const std::string& name, const Tensor& g) {
        double s = 0.0;
        for (double v : g.data) {
            if (!std::isfinite(v))
                fail(ErrorKind::Numeric, "non-finite gradient in " + name);
            s += v * v;
        }
        norm_sq += s;
    });

    const std::uint64_t step = ++state.step;
    const double lr = warmup_lr(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));

    auto ps = collect(params);
    auto gs = collect(grads);
    auto ms = collect(state.m);
    auto vs = collect(state.v);
    for (std::size_t ti = 0; ti < ps.size(); ++ti) {
        double* p = ps[ti]->ptr();
        const double* g = gs[ti]->ptr();
        double* m = ms[ti]->ptr();
        double* v = vs[ti]->ptr();
        const std::size_t n = ps[ti]->numel();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                          cfg.weight_decay * p[i]);
        }
    }
    return std::sqrt(norm_sq);
}

void ema_update(const BackboneParams& params, BackboneParams& shadow,
                double decay) {
    auto ps = collect(params);
    auto ss = collect(shadow);
    for (std::size_t ti = 0; ti < ps.size(); ++ti) {
        const double* p = ps[ti]->ptr();
        double* s = ss[ti]->ptr();
        const std::size_t n = ps[ti]->numel();
        for (std::size_t i = 0; i < n; ++i)
            s[i] = decay * s[i] + (1.0 - decay) * p[i];
    }
}

double clip_gradients(BackboneParams& grads, double max_norm) {
    double norm_sq = 0.0;
    grads.for_each([&](const std::string&, Tensor& g) {
        for (double v : g.data) norm_sq += v * v;
    });
    const double norm = std::sqrt(norm_sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        grads.for_each([&](const std::string&, Tensor& g) {
            for (double& v : g.data) v *= scale;
        });
    }
    return norm;
}

void TrainConfig::validate() const {
    if (max_steps < 1) fail(ErrorKind::Domain, "train: max_steps must be >= 1");
    if (adam.warmup_steps > max_steps)
        fail(ErrorKind::Domain, "train: warmup_steps exceeds max_steps");
    if (!(ema_decay > 0.0 && ema_decay < 1.0))
        fail(ErrorKind::Domain, "train: ema_decay must lie in (0,1)");
    if (batch_size < 1) fail(ErrorKind::Domain, "train: batch_size must be >= 1");
    if (loss_mode == LossMode::Discrete && discrete_steps < 1)
        fail(ErrorKind::Domain, "train: discrete_steps must be >= 1");
}

TrainConfig train_config_from(const Config& cfg) {
    TrainConfig tc;
    tc.adam.lr = cfg.get_double("train.lr", tc.adam.lr);
    tc.adam.beta1 = cfg.get_double("train.beta1", tc.adam.beta1);
    tc.adam.beta2 = cfg.get_double("train.beta2", tc.adam.beta2);
    tc.adam.eps = cfg.get_double("train.eps", tc.adam.eps);
    tc.adam.weight_decay = cfg.get_double("train.weight_decay", 0.0);
    tc.adam.warmup_steps =
        static_cast<std::uint64_t>(cfg.get_int("train.warmup_steps", 2500));
    tc.max_steps =
        static_cast<std::uint64_t>(cfg.get_int("train.max_steps", 20000));
    tc.ema_decay = cfg.get_double("train.ema_decay", 0.9999);
    tc.batch_size = static_cast<int>(cfg.get_int("train.batch_size", 32));
    tc.loss_mode =
        loss_mode_from_name(cfg.get_string("train.loss", "continuous"));
    tc.discrete_steps =
        static_cast<int>(cfg.get_int("train.discrete_steps", 1000));
    tc.grad_clip = cfg.get_double("train.grad_clip", 0.0);
    tc.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
    tc.checkpoint_interval = static_cast<std::uint64_t>(
        cfg.get_int("train.checkpoint_interval", 1000));
    tc.out_dir = cfg.get_string("train.out_dir", "runs/default");
    tc.schedule_eps = cfg.get_double("schedule.eps_min", 1e-3);
    tc.loss_options.active_slots_only =
        cfg.get_bool("train.active_slots_only", false);
    tc.loss_options.t_per_token = cfg.get_bool("train.t_per_token", false);
    tc.loss_options.antithetic = cfg.get_bool("train.antithetic", false);
    return tc;
}

BackboneConfig backbone_config_from(const Config& cfg, int v_total) {
    BackboneConfig bc;
    bc.depth = static_cast<int>(cfg.get_int("model.depth", 12));
    bc.heads = static_cast<int>(cfg.get_int("model.heads", 12));
    bc.width = static_cast<int>(cfg.get_int("model.width", 768));
    bc.seq_len = static_cast<int>(cfg.get_int("model.seq_len", 1024));
    bc.grid_dim = static_cast<int>(cfg.get_int("data.dim", 32));
    bc.v_total = v_total;
    bc.pe_mode = pe_mode_from_name(
        cfg.get_string("model.pe_mode", "sinusoidal3d"));
    const bool ar =
        cfg.get_string("train.loss", "continuous") == "autoregressive";
    bc.causal = cfg.get_bool("model.causal", ar);
    bc.time_conditioning =
        cfg.get_bool("model.time_conditioning", !bc.causal);
    return bc;
}

std::size_t batch_index(std::uint64_t seed, std::size_t dataset_size,
                        std::uint64_t global_slot) {
    const std::uint64_t epoch = global_slot / dataset_size;
    const std::size_t offset =
        static_cast<std::size_t>(global_slot % dataset_size);
    return epoch_permutation(seed, dataset_size, epoch)[offset];
}

TrainResult train(const std::vector<TokenSequence>& dataset,
                  const Vocabulary& vocab, Backbone& net,
                  const TrainConfig& cfg, const std::string& resume_from,
                  const std::function<void(const CurvePoint&)>& on_step) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (dataset.empty()) fail(ErrorKind::Domain, "train: empty dataset");
    if (vocab.total() != net.config().v_total)
        fail(ErrorKind::Domain, "train: vocabulary does not match the model");

    OptimizerState state;
    state.init_shapes(net.config());

    const bool resuming = !resume_from.empty();
    if (resuming) {
        Checkpoint ckpt = load_checkpoint(resume_from);
        const auto& a = ckpt.config;
        const auto& b = net.config();
        if (a.depth != b.depth || a.heads != b.heads || a.width != b.width ||
            a.seq_len != b.seq_len || a.v_total != b.v_total ||
            a.grid_dim != b.grid_dim || a.pe_mode != b.pe_mode ||
            a.time_conditioning != b.time_conditioning ||
            a.causal != b.causal)
            fail(ErrorKind::Data,
                 "resume: checkpoint architecture does not match the config");
        if (ckpt.seed != cfg.seed)
            fail(ErrorKind::Data,
                 "resume: checkpoint seed differs from train.seed; the run "
                 "would not be reproducible");
        net.params() = std::move(ckpt.params);
        net.ema() = std::move(ckpt.ema);
        state = std::move(ckpt.opt);
    }

    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    const std::string curve_path = cfg.out_dir + "/loss.csv";
    std::ofstream curve_out;
    if (resuming) {
        curve_out.open(curve_path, std::ios::app);
    } else {
        curve_out.open(curve_path, std::ios::trunc);
        if (curve_out) curve_out << "step,loss,lr,grad_norm\n";
    }
    if (!curve_out) fail(ErrorKind::Io, "cannot open " + curve_path);

    const NoiseSchedule sched{cfg.schedule_eps};
    Workspace ws;
    BackboneParams grads;
    grads.init_shapes(net.config());

    // epoch permutation cache
    std::uint64_t cached_epoch = static_cast<std::uint64_t>(-1);
    std::vector<std::size_t> perm;
    auto pick_index = [&](std::uint64_t slot) {
        const std::uint64_t epoch = slot / dataset.size();
        if (epoch != cached_epoch) {
            perm = epoch_permutation(cfg.seed, dataset.size(), epoch);
            cached_epoch = epoch;
        }
        return perm[static_cast<std::size_t>(slot % dataset.size())];
    };

    TrainResult result;
    const std::string latest = cfg.out_dir + "/ckpt_latest.sckp";
    auto save = [&]() {
        Checkpoint ckpt;
        ckpt.config = net.config();
        ckpt.params = net.params();
        ckpt.ema = net.ema();
        ckpt.opt = state;
        ckpt.vocab = vocab;
        ckpt.seed = cfg.seed;
        ckpt.schedule_eps = cfg.schedule_eps;
        save_checkpoint(ckpt, latest);
        result.checkpoint_path = latest;
    };

    std::vector<TokenSequence> batch(cfg.batch_size);
    for (std::uint64_t step = state.step + 1; step <= cfg.max_steps; ++step) {
        for (int j = 0; j < cfg.batch_size; ++j) {
            const std::uint64_t slot =
                (step - 1) * static_cast<std::uint64_t>(cfg.batch_size) + j;
            batch[j] = dataset[pick_index(slot)];
        }

        grads.zero();
        TrainLossResult lr_result = train_loss_and_grad(
            batch, net, sched, cfg.loss_mode, cfg.discrete_steps, cfg.seed,
            step, ws, grads, cfg.loss_options);

        if (cfg.grad_clip > 0.0) clip_gradients(grads, cfg.grad_clip);
        const double gnorm = optimizer_step(net.params(), grads, state, cfg.adam);
        ema_update(net.params(), net.ema(), cfg.ema_decay);

        CurvePoint pt{step, lr_result.loss, warmup_lr(cfg.adam, step), gnorm};
        result.curve.push_back(pt);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%.17g\n",
                      static_cast<unsigned long long>(pt.step), pt.loss, pt.lr,
                      pt.grad_norm);
        curve_out << buf;
        if (on_step) on_step(pt);

        if (step % cfg.checkpoint_interval == 0 || step == cfg.max_steps)
            save();
    }
    if (result.checkpoint_path.empty()) save();
    curve_out.flush();
    return result;
}

}  // namespace scaffold
