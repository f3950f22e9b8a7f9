#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "scaffold/checkpoint.hpp"
#include "scaffold/eval.hpp"
#include "scaffold/synthetic.hpp"
#include "scaffold/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scaffold;

namespace {

struct DataDir {
    int dim = 0;
    std::size_t max_blocks = 0;
    Vocabulary vocab;
    std::vector<VoxelGrid> grids;
};

void write_data_dir(const std::string& dir, int dim, std::size_t max_blocks,
                    const Vocabulary& vocab,
                    const std::vector<VoxelGrid>& grids,
                    const std::vector<std::string>& house_ids,
                    const SparsityStats& stats) {
    fs::create_directories(dir + "/structures");

    json vocab_j{{"blocks", vocab.block_ids()}};
    std::ofstream(dir + "/vocab.json") << vocab_j.dump() << "\n";

    json manifest = json::array();
    for (std::size_t i = 0; i < grids.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05zu.json", i);
        std::ofstream out(dir + "/structures/" + name);
        write_voxel_json(grids[i], out);
        manifest.push_back({{"file", std::string("structures/") + name},
                            {"house_id", house_ids[i]},
                            {"k", grids[i].occupied()}});
    }
    std::ofstream(dir + "/manifest.json") << manifest.dump() << "\n";

    json stats_j{{"dim", dim},
                 {"max_blocks", max_blocks},
                 {"retained", grids.size()},
                 {"mean_background_fraction", stats.mean_background_fraction}};
    std::ofstream(dir + "/stats.json") << stats_j.dump() << "\n";
}

DataDir load_data_dir(const std::string& dir) {
    DataDir d;
    std::ifstream stats_in(dir + "/stats.json");
    if (!stats_in) fail(ErrorKind::Data, "missing " + dir + "/stats.json");
    json stats_j = json::parse(stats_in, nullptr, false);
    if (stats_j.is_discarded())
        fail(ErrorKind::Data, "malformed stats.json in " + dir);
    d.dim = stats_j.at("dim").get<int>();
    d.max_blocks = stats_j.at("max_blocks").get<std::size_t>();

    std::ifstream vocab_in(dir + "/vocab.json");
    if (!vocab_in) fail(ErrorKind::Data, "missing " + dir + "/vocab.json");
    json vocab_j = json::parse(vocab_in, nullptr, false);
    if (vocab_j.is_discarded())
        fail(ErrorKind::Data, "malformed vocab.json in " + dir);
    d.vocab = Vocabulary(vocab_j.at("blocks").get<std::vector<int>>());

    std::ifstream man_in(dir + "/manifest.json");
    if (!man_in) fail(ErrorKind::Data, "missing " + dir + "/manifest.json");
    json manifest = json::parse(man_in, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_array())
        fail(ErrorKind::Data, "malformed manifest.json in " + dir);
    for (const auto& entry : manifest) {
        std::ifstream g_in(dir + "/" + entry.at("file").get<std::string>());
        d.grids.push_back(read_voxel_json(g_in));
    }
    return d;
}

std::vector<TokenSequence> sequences_from(const DataDir& d,
                                          std::size_t seq_len) {
    std::vector<TokenSequence> out;
    out.reserve(d.grids.size());
    for (const auto& g : d.grids)
        out.push_back(extract_sequence(g, seq_len, d.vocab));
    return out;
}

int run_ingest(const std::string& in_path, const std::string& out_dir,
               int dim, std::size_t max_blocks) {
    std::ifstream in(in_path);
    if (!in) fail(ErrorKind::Data, "cannot open " + in_path);
    ParsedPlacements parsed = parse_placements(in);
    for (std::size_t i = 0; i < parsed.issues.size() && i < 20; ++i)
        std::cerr << "line " << parsed.issues[i].line << ": "
                  << parsed.issues[i].reason << "\n";
    if (!parsed.issues.empty())
        std::cerr << parsed.issues.size() << " malformed record(s) skipped, "
                  << parsed.records_ok << " accepted\n";

    std::vector<VoxelGrid> grids;
    std::vector<std::string> house_ids;
    std::size_t too_large = 0;
    for (const auto& [house_id, placements] : parsed.houses) {
        try {
            grids.push_back(voxelize(placements, dim));
            house_ids.push_back(house_id);
        } catch (const ScaffoldError& e) {
            if (e.kind() != ErrorKind::StructureTooLarge) throw;
            ++too_large;
        }
    }

    FilterResult filtered = filter_dataset(std::move(grids), max_blocks, dim);
    std::vector<std::string> retained_ids;
    for (std::size_t idx : filtered.retained_indices)
        retained_ids.push_back(house_ids[idx]);

    if (filtered.retained.empty())
        fail(ErrorKind::Data, "no structures retained after filtering");

    Vocabulary vocab = Vocabulary::from_grids(filtered.retained);
    SparsityStats stats = sparsity_stats(filtered.retained, dim);
    write_data_dir(out_dir, dim, max_blocks, vocab, filtered.retained,
                   retained_ids, stats);

    std::cout << "retained " << filtered.retained.size() << " structures ("
              << filtered.rejected() + too_large << " rejected: " << too_large
              << " too large, " << filtered.rejected_too_many
              << " over block budget, " << filtered.rejected_empty
              << " empty)\n";
    std::cout << "vocabulary size " << vocab.size()
              << ", mean background fraction "
              << stats.mean_background_fraction << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& resume) {
    Config cfg = Config::parse_file(config_path);
    const std::string data_path = cfg.get_string("data.path", "");
    if (data_path.empty())
        fail(ErrorKind::Data, "config must set data.path");
    DataDir data = load_data_dir(data_path);

    TrainConfig tc = train_config_from(cfg);
    BackboneConfig bc = backbone_config_from(cfg, data.vocab.total());
    bc.grid_dim = static_cast<int>(cfg.get_int("data.dim", data.dim));

    std::vector<TokenSequence> dataset =
        sequences_from(data, static_cast<std::size_t>(bc.seq_len));

    Backbone net(bc, tc.seed);
    TrainResult result = train(dataset, data.vocab, net, tc, resume,
                               [](const CurvePoint& pt) {
                                   if (pt.step % 100 == 0)
                                       std::cerr << "step " << pt.step
                                                 << " loss " << pt.loss << "\n";
                               });
    std::cout << result.checkpoint_path << "\n";
    return 0;
}

int run_sample(const std::string& ckpt_path, const std::string& occupancy_path,
               long long from_data, const std::string& data_dir, int steps,
               std::uint64_t seed, int count, bool trace, bool no_cache,
               bool ar, double temperature, const std::string& out_dir,
               bool binary, const std::string& config_path, bool steps_given) {
    double eps_override = -1.0;
    if (!config_path.empty()) {
        Config cfg = Config::parse_file(config_path);
        if (!steps_given)
            steps = static_cast<int>(cfg.get_int("sample.steps", steps));
        eps_override = cfg.get_double("schedule.eps_min", -1.0);
    }
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (eps_override > 0.0) ckpt.schedule_eps = eps_override;
    Backbone net(ckpt.config, 0);
    net.params() = std::move(ckpt.params);
    net.ema() = std::move(ckpt.ema);

    OccupancyMap occ;
    if (!occupancy_path.empty()) {
        std::ifstream in(occupancy_path);
        if (!in) fail(ErrorKind::Data, "cannot open " + occupancy_path);
        occ = read_occupancy_json(in);
    } else {
        if (from_data < 0)
            fail(ErrorKind::Usage, "need --occupancy or --from-data");
        if (data_dir.empty())
            fail(ErrorKind::Usage, "--from-data needs --data DIR");
        DataDir data = load_data_dir(data_dir);
        if (from_data >= static_cast<long long>(data.grids.size()))
            fail(ErrorKind::Data, "--from-data index out of range");
        occ = footprint(data.grids[static_cast<std::size_t>(from_data)]);
    }

    NoiseSchedule sched{ckpt.schedule_eps};
    GenerateOptions opts;
    opts.steps = steps;
    opts.cached = !no_cache;
    opts.write_trace = trace;
    opts.write_binary = binary;
    opts.autoregressive = ar;
    opts.temperature = temperature;

    std::vector<OccupancyMap> occs(count, occ);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < count; ++i) seeds.push_back(seed + i);

    auto items = generate_batch(occs, seeds, net, net.ema(), ckpt.vocab,
                                sched, out_dir, opts);
    std::size_t failures = 0;
    for (const auto& item : items) {
        if (!item.error.empty()) {
            ++failures;
            std::cerr << "seed " << item.seed << ": " << item.error << "\n";
            continue;
        }
        for (const auto& f : item.files) std::cout << f << "\n";
    }
    if (failures == items.size() && !items.empty())
        fail(ErrorKind::Data, "all samples failed");
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             int mc_draws, std::uint64_t seed, bool raw_weights,
             bool active_only) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Backbone net(ckpt.config, 0);
    net.params() = std::move(ckpt.params);
    net.ema() = std::move(ckpt.ema);

    DataDir data = load_data_dir(data_dir);
    if (data.vocab.total() != ckpt.config.v_total)
        fail(ErrorKind::Data, "data vocabulary does not match the checkpoint");
    std::vector<TokenSequence> dataset =
        sequences_from(data, static_cast<std::size_t>(ckpt.config.seq_len));

    LossOptions opts;
    opts.active_slots_only = active_only;
    const BackboneParams& p = raw_weights ? net.params() : net.ema();

    EvalReport rep;
    if (ckpt.config.causal) {
        rep = evaluate_nll_autoregressive(dataset, net, p, opts);
    } else {
        NoiseSchedule sched{ckpt.schedule_eps};
        BackboneDenoiser denoiser(net, p);
        rep = evaluate_nll(dataset, denoiser, sched, mc_draws, seed, opts);
    }

    json freq = json::object();
    for (const auto& [tok, n] : rep.category_frequency) {
        const int block = tok < data.vocab.size() ? data.vocab.block(tok) : -1;
        freq[std::to_string(block)] = n;
    }
    json out{{"nll", rep.nll},
             {"perplexity", rep.perplexity},
             {"std_error", rep.std_error},
             {"token_count", rep.token_count},
             {"mc_draws", rep.mc_draws},
             {"data_category_frequency", std::move(freq)},
             {"draw_seeds", rep.draw_seeds}};
    std::cout << out.dump() << "\n";
    return 0;
}

int run_stats(const std::string& data_dir) {
    DataDir data = load_data_dir(data_dir);
    SparsityStats stats = sparsity_stats(data.grids, data.dim);
    std::size_t k_min = SIZE_MAX, k_max = 0;
    for (const auto& [k, n] : stats.k_histogram) {
        k_min = std::min(k_min, k);
        k_max = std::max(k_max, k);
    }
    json hist = json::object();
    for (const auto& [id, n] : stats.category_histogram)
        hist[std::to_string(id)] = n;
    json out{{"structures", stats.grid_count},
             {"dim", data.dim},
             {"mean_background_fraction", stats.mean_background_fraction},
             {"k_min", k_min},
             {"k_max", k_max},
             {"vocabulary_size", data.vocab.size()},
             {"category_histogram", std::move(hist)}};
    std::cout << out.dump() << "\n";
    return 0;
}

int run_synth(const std::string& task, std::size_t houses, int dim,
              std::size_t k_min, std::size_t k_max, std::uint64_t seed,
              const std::string& out_path) {
    std::vector<VoxelGrid> grids;
    if (task == "parity") {
        grids = make_parity_houses(houses, dim, k_min, k_max, seed);
    } else if (task == "sticky") {
        grids = make_sticky_houses(houses, dim, k_min, k_max, 0.9, 8, seed);
    } else {
        fail(ErrorKind::Usage, "unknown task '" + task + "'");
    }
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open " + out_path);
    for (const auto& p : placements_from_grids(grids)) {
        json j{{"house_id", p.house_id}, {"x", p.x},        {"y", p.y},
               {"z", p.z},               {"block_id", p.block_id},
               {"t", p.t}};
        out << j.dump() << "\n";
    }
    std::cout << "wrote " << houses << " houses to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"occupancy-conditioned discrete diffusion for sparse voxel "
                 "structures"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "parse a placement log into "
                                                "a structure dataset");
    std::string in_path, out_dir;
    int dim = 32;
    std::size_t max_blocks = 1024;
    ingest->add_option("--in", in_path, "placement NDJSON file")->required();
    ingest->add_option("--out", out_dir, "output dataset directory")->required();
    ingest->add_option("--dim", dim, "voxel cube side");
    ingest->add_option("--max-blocks", max_blocks, "occupancy budget");

    // train
    auto* train_cmd = app.add_subcommand("train", "run the training loop");
    std::string config_path, resume_path;
    train_cmd->add_option("--config", config_path, "key=value config file")
        ->required();
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume");

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "generate structures");
    std::string ckpt_path, occupancy_path, sample_data, sample_out = "samples";
    std::string sample_config;
    long long from_data = -1;
    int steps = 256, count = 1;
    std::uint64_t seed = 0;
    bool trace = false, no_cache = false, ar = false, binary = false;
    double temperature = 1.0;
    sample_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    sample_cmd->add_option("--occupancy", occupancy_path, "occupancy JSON");
    sample_cmd->add_option("--from-data", from_data,
                           "use structure N's footprint");
    sample_cmd->add_option("--data", sample_data, "dataset dir for --from-data");
    sample_cmd->add_option("--config", sample_config,
                           "config file for sample.steps / schedule.eps_min");
    auto* steps_opt = sample_cmd->add_option("--steps", steps, "reverse steps");
    sample_cmd->add_option("--seed", seed, "sampling seed");
    sample_cmd->add_option("--count", count, "samples to draw");
    sample_cmd->add_option("--out", sample_out, "output directory");
    sample_cmd->add_option("--temperature", temperature,
                           "decoding temperature (causal baseline)");
    sample_cmd->add_flag("--trace", trace, "write generation traces");
    sample_cmd->add_flag("--no-cache", no_cache, "disable cached updates");
    sample_cmd->add_flag("--ar", ar, "decode with the causal baseline");
    sample_cmd->add_flag("--binary", binary, "also write SCFD files");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "report NLL/perplexity");
    std::string eval_ckpt, eval_data;
    int mc_draws = 8;
    std::uint64_t eval_seed = 0;
    bool raw_weights = false, active_only = false;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
    eval_cmd->add_option("--data", eval_data, "dataset dir")->required();
    eval_cmd->add_option("--mc-draws", mc_draws, "corruption draws/sequence");
    eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
    eval_cmd->add_flag("--raw-weights", raw_weights,
                       "evaluate raw instead of EMA weights");
    eval_cmd->add_flag("--active-only", active_only,
                       "score active slots only (exclude PAD)");

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "dataset sparsity report");
    std::string stats_data;
    stats_cmd->add_option("--data", stats_data, "dataset dir")->required();

    // synth
    auto* synth_cmd =
        app.add_subcommand("synth", "emit a synthetic placement log");
    std::string synth_task = "parity", synth_out = "synthetic.ndjson";
    std::size_t synth_houses = 512, synth_kmin = 16, synth_kmax = 56;
    int synth_dim = 8;
    std::uint64_t synth_seed = 0;
    synth_cmd->add_option("--task", synth_task, "parity or sticky");
    synth_cmd->add_option("--houses", synth_houses, "house count");
    synth_cmd->add_option("--dim", synth_dim, "cube side");
    synth_cmd->add_option("--kmin", synth_kmin, "min occupied voxels");
    synth_cmd->add_option("--kmax", synth_kmax, "max occupied voxels");
    synth_cmd->add_option("--seed", synth_seed, "generator seed");
    synth_cmd->add_option("--out", synth_out, "output NDJSON path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*ingest) return run_ingest(in_path, out_dir, dim, max_blocks);
        if (*train_cmd) return run_train(config_path, resume_path);
        if (*sample_cmd)
            return run_sample(ckpt_path, occupancy_path, from_data,
                              sample_data, steps, seed, count, trace, no_cache,
                              ar, temperature, sample_out, binary,
                              sample_config, steps_opt->count() > 0);
        if (*eval_cmd)
            return run_eval(eval_ckpt, eval_data, mc_draws, eval_seed,
                            raw_weights, active_only);
        if (*stats_cmd) return run_stats(stats_data);
        if (*synth_cmd)
            return run_synth(synth_task, synth_houses, synth_dim, synth_kmin,
                             synth_kmax, synth_seed, synth_out);
    } catch (const ScaffoldError& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
            case ErrorKind::Usage: return 1;
            case ErrorKind::Numeric: return 3;
            default: return 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
