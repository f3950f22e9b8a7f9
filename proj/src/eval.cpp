#include "scaffold/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "scaffold/rng.hpp"

namespace scaffold {

namespace {

EvalReport finish_report(std::vector<double> draw_means,
                         std::size_t token_count, int mc_draws) {
    EvalReport rep;
    rep.token_count = token_count;
    rep.mc_draws = mc_draws;
    double mean = 0.0;
    for (double v : draw_means) mean += v;
    mean /= static_cast<double>(draw_means.size());
    rep.nll = mean;
    rep.perplexity = std::exp(mean);
    if (draw_means.size() > 1) {
        double var = 0.0;
        for (double v : draw_means) var += (v - mean) * (v - mean);
        var /= static_cast<double>(draw_means.size() - 1);
        rep.std_error = std::sqrt(var / static_cast<double>(draw_means.size()));
    }
    return rep;
}

void count_categories(const std::vector<TokenSequence>& dataset,
                      EvalReport& rep) {
    for (const auto& seq : dataset)
        for (std::size_t l = 0; l < seq.active; ++l)
            ++rep.category_frequency[seq.tokens[l]];
}

}  // namespace

EvalReport evaluate_nll(const std::vector<TokenSequence>& dataset,
                        const Denoiser& model, const NoiseSchedule& sched,
                        int mc_draws, std::uint64_t seed,
                        const LossOptions& opts) {
    if (dataset.empty()) fail(ErrorKind::Domain, "evaluate_nll: empty dataset");
    if (mc_draws < 1) fail(ErrorKind::Domain, "evaluate_nll: mc_draws >= 1");

    std::vector<double> draw_means(mc_draws, 0.0);
    std::size_t token_count = 0;
    std::vector<std::uint64_t> draw_seeds;
    for (int d = 0; d < mc_draws; ++d) {
        const std::uint64_t draw_seed = seed + static_cast<std::uint64_t>(d);
        draw_seeds.push_back(draw_seed);
        LossValue lv = loss_continuous(dataset, model, sched, draw_seed,
                                       /*step=*/d, opts);
        draw_means[d] = lv.loss;
        token_count = lv.token_count;
    }
    EvalReport rep = finish_report(std::move(draw_means), token_count, mc_draws);
    rep.draw_seeds = std::move(draw_seeds);
    count_categories(dataset, rep);
    return rep;
}

EvalReport evaluate_nll_autoregressive(
    const std::vector<TokenSequence>& dataset, const Backbone& net,
    const BackboneParams& params, const LossOptions& opts) {
    if (dataset.empty())
        fail(ErrorKind::Domain, "evaluate_nll_autoregressive: empty dataset");
    LossValue lv = loss_autoregressive(dataset, net, params, opts);
    EvalReport rep;
    rep.nll = lv.loss;
    rep.perplexity = std::exp(lv.loss);
    rep.token_count = lv.token_count;
    rep.mc_draws = 1;
    count_categories(dataset, rep);
    return rep;
}

CategoryHistogram category_histogram(
    const std::vector<VoxelGrid>& structures) {
    if (structures.empty())
        fail(ErrorKind::Domain, "category_histogram: empty structure list");
    CategoryHistogram hist;
    for (const auto& g : structures) {
        for (const auto& [c, id] : g.cells) {
            ++hist.counts[id];
            ++hist.total;
        }
    }
    if (hist.total == 0) return hist;
    std::vector<std::size_t> counts;
    counts.reserve(hist.counts.size());
    for (const auto& [id, n] : hist.counts) counts.push_back(n);
    std::sort(counts.rbegin(), counts.rend());
    std::size_t top = 0;
    for (std::size_t i = 0; i < counts.size() && i < 3; ++i) top += counts[i];
    hist.collapse_score =
        static_cast<double>(top) / static_cast<double>(hist.total);
    return hist;
}

std::vector<GeneratedItem> generate_batch(
    const std::vector<OccupancyMap>& occupancies,
    const std::vector<std::uint64_t>& seeds, const Backbone& net,
    const BackboneParams& params, const Vocabulary& vocab,
    const NoiseSchedule& sched, const std::string& out_dir,
    const GenerateOptions& opts) {
    namespace fs = std::filesystem;
    if (occupancies.size() != seeds.size())
        fail(ErrorKind::Domain, "generate_batch: need one seed per occupancy");
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    BackboneDenoiser denoiser(net, params);
    std::vector<GeneratedItem> items;
    for (std::size_t i = 0; i < occupancies.size(); ++i) {
        GeneratedItem item;
        item.seed = seeds[i];
        try {
            SampleTrace trace;
            if (opts.autoregressive) {
                item.grid = sample_autoregressive(occupancies[i], net, params,
                                                  vocab, opts.temperature,
                                                  seeds[i]);
            } else {
                SampleResult res = sample(occupancies[i], denoiser, vocab,
                                          sched, opts.steps, seeds[i],
                                          opts.cached);
                item.grid = std::move(res.grid);
                trace = std::move(res.trace);
            }
            const std::string stem = out_dir + "/sample_seed" +
                                     std::to_string(seeds[i]) + "_steps" +
                                     std::to_string(opts.steps);
            if (opts.write_json) {
                std::ofstream out(stem + ".json", std::ios::trunc);
                write_voxel_json(item.grid, out);
                item.files.push_back(stem + ".json");
            }
            if (opts.write_binary) {
                std::ofstream out(stem + ".scfd",
                                  std::ios::trunc | std::ios::binary);
                write_voxel_scfd(item.grid, out);
                item.files.push_back(stem + ".scfd");
            }
            if (opts.write_trace && !opts.autoregressive) {
                std::ofstream out(stem + ".trace.ndjson", std::ios::trunc);
                write_trace_ndjson(trace, vocab.specials().mask(), out);
                item.files.push_back(stem + ".trace.ndjson");
            }
        } catch (const ScaffoldError& e) {
            item.error = e.what();
        }
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace scaffold
