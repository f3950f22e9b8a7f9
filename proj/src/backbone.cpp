#include "scaffold/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "scaffold/rng.hpp"

namespace scaffold {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kTimeScale = 1000.0;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
    double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
}
inline double gelu_grad(double x) {
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)) +
           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void add_bias(double* x, const double* b, std::size_t rows, std::size_t n) {
    for (std::size_t i = 0; i < rows; ++i) {
        double* row = x + i * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += b[j];
    }
}

void layernorm_forward(const double* x, double* xhat, double* rstd,
                       std::size_t rows, std::size_t w) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x + i * w;
        double* hr = xhat + i * w;
        double mean = 0.0;
        for (std::size_t j = 0; j < w; ++j) mean += xr[j];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
            double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(w);
        double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[i] = r;
        for (std::size_t j = 0; j < w; ++j) hr[j] = (xr[j] - mean) * r;
    }
}

// Accumulates d(loss)/dx into dx given d(loss)/dxhat.
void layernorm_backward(const double* dxhat, const double* xhat,
                        const double* rstd, double* dx, std::size_t rows,
                        std::size_t w) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* dh = dxhat + i * w;
        const double* h = xhat + i * w;
        double* dr = dx + i * w;
        double mean_dh = 0.0, mean_dhh = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
            mean_dh += dh[j];
            mean_dhh += dh[j] * h[j];
        }
        mean_dh /= static_cast<double>(w);
        mean_dhh /= static_cast<double>(w);
        double r = rstd[i];
        for (std::size_t j = 0; j < w; ++j)
            dr[j] += r * (dh[j] - mean_dh - h[j] * mean_dhh);
    }
}

// out[b,l,:] = xhat[b,l,:] * (1 + sc[b,:]) + sh[b,:]
void modulate_forward(const double* xhat, const double* mod, int sh_chunk,
                      int sc_chunk, double* out, int batch, int length,
                      int w) {
    for (int b = 0; b < batch; ++b) {
        const double* sh = mod + (static_cast<std::size_t>(b) * 6 + sh_chunk) * w;
        const double* sc = mod + (static_cast<std::size_t>(b) * 6 + sc_chunk) * w;
        for (int l = 0; l < length; ++l) {
            std::size_t off = (static_cast<std::size_t>(b) * length + l) * w;
            for (int j = 0; j < w; ++j)
                out[off + j] = xhat[off + j] * (1.0 + sc[j]) + sh[j];
        }
    }
}

void modulate_backward(const double* d_out, const double* xhat,
                       const double* mod, int sh_chunk, int sc_chunk,
                       double* d_xhat, double* d_mod, int batch, int length,
                       int w) {
    for (int b = 0; b < batch; ++b) {
        const double* sc = mod + (static_cast<std::size_t>(b) * 6 + sc_chunk) * w;
        double* dsh = d_mod + (static_cast<std::size_t>(b) * 6 + sh_chunk) * w;
        double* dsc = d_mod + (static_cast<std::size_t>(b) * 6 + sc_chunk) * w;
        for (int l = 0; l < length; ++l) {
            std::size_t off = (static_cast<std::size_t>(b) * length + l) * w;
            for (int j = 0; j < w; ++j) {
                double d = d_out[off + j];
                d_xhat[off + j] = d * (1.0 + sc[j]);
                dsh[j] += d;
                dsc[j] += d * xhat[off + j];
            }
        }
    }
}

// out[b,l,:] = x[b,l,:] + (1 + g[b,:]) * y[b,l,:]
void gated_residual_forward(const double* x, const double* y,
                            const double* mod, int g_chunk, double* out,
                            int batch, int length, int w) {
    for (int b = 0; b < batch; ++b) {
        const double* g = mod + (static_cast<std::size_t>(b) * 6 + g_chunk) * w;
        for (int l = 0; l < length; ++l) {
            std::size_t off = (static_cast<std::size_t>(b) * length + l) * w;
            for (int j = 0; j < w; ++j)
                out[off + j] = x[off + j] + (1.0 + g[j]) * y[off + j];
        }
    }
}

// d_x = d_out (copy), d_y = d_out * (1 + g), d_mod[g] += d_out * y
void gated_residual_backward(const double* d_out, const double* y,
                             const double* mod, int g_chunk, double* d_x,
                             double* d_y, double* d_mod, int batch, int length,
                             int w) {
    for (int b = 0; b < batch; ++b) {
        const double* g = mod + (static_cast<std::size_t>(b) * 6 + g_chunk) * w;
        double* dg = d_mod + (static_cast<std::size_t>(b) * 6 + g_chunk) * w;
        for (int l = 0; l < length; ++l) {
            std::size_t off = (static_cast<std::size_t>(b) * length + l) * w;
            for (int j = 0; j < w; ++j) {
                double d = d_out[off + j];
                d_x[off + j] = d;
                d_y[off + j] = d * (1.0 + g[j]);
                dg[j] += d * y[off + j];
            }
        }
    }
}

void attention_forward(const double* qkv, double* att_p, double* ctx,
                       int batch, int length, int w, int heads, bool causal) {
    const int dh = w / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t row3 = static_cast<std::size_t>(3) * w;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bh = 0;
         bh < static_cast<std::ptrdiff_t>(batch) * heads; ++bh) {
        const int b = static_cast<int>(bh / heads);
        const int h = static_cast<int>(bh % heads);
        const double* base = qkv + static_cast<std::size_t>(b) * length * row3;
        double* pmat = att_p + static_cast<std::size_t>(bh) * length * length;
        for (int l1 = 0; l1 < length; ++l1) {
            const double* q = base + l1 * row3 + h * dh;
            double* prow = pmat + static_cast<std::size_t>(l1) * length;
            const int lmax = causal ? l1 + 1 : length;
            double maxv = -std::numeric_limits<double>::infinity();
            for (int l2 = 0; l2 < lmax; ++l2) {
                const double* k = base + l2 * row3 + w + h * dh;
                double s = 0.0;
                for (int d = 0; d < dh; ++d) s += q[d] * k[d];
                s *= scale;
                prow[l2] = s;
                maxv = std::max(maxv, s);
            }
            double sum = 0.0;
            for (int l2 = 0; l2 < lmax; ++l2) {
                prow[l2] = std::exp(prow[l2] - maxv);
                sum += prow[l2];
            }
            const double inv = 1.0 / sum;
            for (int l2 = 0; l2 < lmax; ++l2) prow[l2] *= inv;
            for (int l2 = lmax; l2 < length; ++l2) prow[l2] = 0.0;

            double* c = ctx + (static_cast<std::size_t>(b) * length + l1) * w +
                        h * dh;
            std::memset(c, 0, dh * sizeof(double));
            for (int l2 = 0; l2 < lmax; ++l2) {
                const double p = prow[l2];
                if (p == 0.0) continue;
                const double* v = base + l2 * row3 + 2 * w + h * dh;
                for (int d = 0; d < dh; ++d) c[d] += p * v[d];
            }
        }
    }
}

// d_qkv must be zeroed by the caller. d_attp is scratch of att_p's size.
void attention_backward(const double* qkv, const double* att_p,
                        const double* d_ctx, double* d_qkv, double* d_attp,
                        int batch, int length, int w, int heads, bool causal) {
    const int dh = w / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t row3 = static_cast<std::size_t>(3) * w;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bh = 0;
         bh < static_cast<std::ptrdiff_t>(batch) * heads; ++bh) {
        const int b = static_cast<int>(bh / heads);
        const int h = static_cast<int>(bh % heads);
        const double* base = qkv + static_cast<std::size_t>(b) * length * row3;
        double* dbase = d_qkv + static_cast<std::size_t>(b) * length * row3;
        const double* pmat = att_p + static_cast<std::size_t>(bh) * length * length;
        double* dsmat = d_attp + static_cast<std::size_t>(bh) * length * length;

        // dP and dV
        for (int l1 = 0; l1 < length; ++l1) {
            const double* dc =
                d_ctx + (static_cast<std::size_t>(b) * length + l1) * w + h * dh;
            const double* prow = pmat + static_cast<std::size_t>(l1) * length;
            double* dsrow = dsmat + static_cast<std::size_t>(l1) * length;
            const int lmax = causal ? l1 + 1 : length;
            for (int l2 = 0; l2 < lmax; ++l2) {
                const double* v = base + l2 * row3 + 2 * w + h * dh;
                double* dv = dbase + l2 * row3 + 2 * w + h * dh;
                double dp = 0.0;
                const double p = prow[l2];
                for (int d = 0; d < dh; ++d) {
                    dp += dc[d] * v[d];
                    dv[d] += p * dc[d];
                }
                dsrow[l2] = dp;
            }
            // softmax backward: ds = p * (dp - sum(dp * p))
            double rowdot = 0.0;
            for (int l2 = 0; l2 < lmax; ++l2) rowdot += dsrow[l2] * prow[l2];
            for (int l2 = 0; l2 < lmax; ++l2)
                dsrow[l2] = prow[l2] * (dsrow[l2] - rowdot);
            for (int l2 = lmax; l2 < length; ++l2) dsrow[l2] = 0.0;
        }

        // dQ and dK
        for (int l1 = 0; l1 < length; ++l1) {
            const double* dsrow = dsmat + static_cast<std::size_t>(l1) * length;
            double* dq = dbase + l1 * row3 + h * dh;
            const double* q = base + l1 * row3 + h * dh;
            const int lmax = causal ? l1 + 1 : length;
            for (int l2 = 0; l2 < lmax; ++l2) {
                const double ds = dsrow[l2] * scale;
                if (ds == 0.0) continue;
                const double* k = base + l2 * row3 + w + h * dh;
                double* dk = dbase + l2 * row3 + w + h * dh;
                for (int d = 0; d < dh; ++d) {
                    dq[d] += ds * k[d];
                    dk[d] += ds * q[d];
                }
            }
        }
    }
}

void check_finite(const Tensor& t, const std::string& where) {
    if (!all_finite(t.ptr(), t.numel()))
        fail(ErrorKind::Numeric, "non-finite activations in " + where);
}

}  // namespace

const char* pe_mode_name(PeMode mode) {
    switch (mode) {
        case PeMode::Sinusoidal3D: return "sinusoidal3d";
        case PeMode::LearnedCoord: return "learned";
        case PeMode::LearnedSlot: return "learned_slot";
    }
    return "?";
}

PeMode pe_mode_from_name(const std::string& name) {
    if (name == "sinusoidal3d") return PeMode::Sinusoidal3D;
    if (name == "learned") return PeMode::LearnedCoord;
    if (name == "learned_slot") return PeMode::LearnedSlot;
    fail(ErrorKind::Domain, "unknown positional encoding mode '" + name + "'");
}

void BackboneConfig::validate() const {
    if (depth < 1) fail(ErrorKind::Domain, "config: depth must be >= 1");
    if (heads < 1) fail(ErrorKind::Domain, "config: heads must be >= 1");
    if (width < 2 || width % 2 != 0)
        fail(ErrorKind::Domain, "config: width must be a positive even number");
    if (width % heads != 0)
        fail(ErrorKind::Domain, "config: width must be divisible by heads");
    if (pe_mode == PeMode::Sinusoidal3D && width < 6)
        fail(ErrorKind::Domain, "config: width too small for 3D encodings");
    if (seq_len < 1) fail(ErrorKind::Domain, "config: seq_len must be >= 1");
    if (v_total < 4)
        fail(ErrorKind::Domain, "config: v_total must cover one block token "
                                "plus MASK/PAD/BOS");
    if (grid_dim < 1) fail(ErrorKind::Domain, "config: grid_dim must be >= 1");
    if (causal && time_conditioning)
        fail(ErrorKind::Domain,
             "config: the causal baseline runs without time conditioning");
}

void positional_encoding_3d(Coord pos, int width, int grid_dim, double* out) {
    if (width <= 0 || width % 6 != 0)
        fail(ErrorKind::Domain,
             "positional_encoding_3d: width must be divisible by 6");
    if (pos.is_pad()) {
        std::fill(out, out + width, 0.0);
        return;
    }
    if (pos.x >= grid_dim || pos.y >= grid_dim || pos.z >= grid_dim)
        fail(ErrorKind::Domain, "positional_encoding_3d: coordinate out of "
                                "range for grid_dim " +
                                    std::to_string(grid_dim));
    const int axis_len = width / 3;
    const int pairs = axis_len / 2;
    const double coords[3] = {static_cast<double>(pos.x),
                              static_cast<double>(pos.y),
                              static_cast<double>(pos.z)};
    for (int axis = 0; axis < 3; ++axis) {
        double* o = out + axis * axis_len;
        for (int j = 0; j < pairs; ++j) {
            double omega =
                std::pow(10000.0, -2.0 * j / static_cast<double>(axis_len));
            o[2 * j] = std::sin(coords[axis] * omega);
            o[2 * j + 1] = std::cos(coords[axis] * omega);
        }
    }
}

void time_features(double t, int width, double* out) {
    const int pairs = width / 2;
    const double v = kTimeScale * t;
    for (int j = 0; j < pairs; ++j) {
        double omega = std::pow(10000.0, -2.0 * j / static_cast<double>(width));
        out[2 * j] = std::sin(v * omega);
        out[2 * j + 1] = std::cos(v * omega);
    }
}

void BackboneParams::init_shapes(const BackboneConfig& cfg) {
    const std::size_t w = cfg.width;
    const std::size_t v = cfg.v_total;
    tok_emb.reset({v, w});
    if (cfg.pe_mode == PeMode::LearnedCoord) {
        std::size_t d = cfg.grid_dim;
        pe_table.reset({d * d * d, w});
    } else if (cfg.pe_mode == PeMode::LearnedSlot) {
        pe_table.reset({static_cast<std::size_t>(cfg.seq_len), w});
    } else {
        pe_table = Tensor{};
    }
    if (cfg.time_conditioning) {
        time_fc1_w.reset({w, w});
        time_fc1_b.reset({w});
        time_fc2_w.reset({w, w});
        time_fc2_b.reset({w});
        final_adaln_w.reset({w, 2 * w});
        final_adaln_b.reset({2 * w});
    } else {
        time_fc1_w = time_fc1_b = time_fc2_w = time_fc2_b = Tensor{};
        final_adaln_w = final_adaln_b = Tensor{};
    }
    blocks.assign(cfg.depth, BlockParams{});
    for (auto& blk : blocks) {
        if (cfg.time_conditioning) {
            blk.adaln_w.reset({w, 6 * w});
            blk.adaln_b.reset({6 * w});
        }
        blk.qkv_w.reset({w, 3 * w});
        blk.qkv_b.reset({3 * w});
        blk.proj_w.reset({w, w});
        blk.proj_b.reset({w});
        blk.fc1_w.reset({w, 4 * w});
        blk.fc1_b.reset({4 * w});
        blk.fc2_w.reset({4 * w, w});
        blk.fc2_b.reset({w});
    }
    head_w.reset({w, v});
    head_b.reset({v});
}

void BackboneParams::zero() {
    for_each([](const std::string&, Tensor& t) { t.zero(); });
}

void BackboneParams::for_each(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    auto visit = [&](const std::string& name, Tensor& t) {
        if (!t.empty()) fn(name, t);
    };
    visit("tok_emb", tok_emb);
    visit("pe_table", pe_table);
    visit("time.fc1.w", time_fc1_w);
    visit("time.fc1.b", time_fc1_b);
    visit("time.fc2.w", time_fc2_w);
    visit("time.fc2.b", time_fc2_b);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string pfx = "block" + std::to_string(i) + ".";
        visit(pfx + "adaln.w", blocks[i].adaln_w);
        visit(pfx + "adaln.b", blocks[i].adaln_b);
        visit(pfx + "qkv.w", blocks[i].qkv_w);
        visit(pfx + "qkv.b", blocks[i].qkv_b);
        visit(pfx + "proj.w", blocks[i].proj_w);
        visit(pfx + "proj.b", blocks[i].proj_b);
        visit(pfx + "mlp.fc1.w", blocks[i].fc1_w);
        visit(pfx + "mlp.fc1.b", blocks[i].fc1_b);
        visit(pfx + "mlp.fc2.w", blocks[i].fc2_w);
        visit(pfx + "mlp.fc2.b", blocks[i].fc2_b);
    }
    visit("final.adaln.w", final_adaln_w);
    visit("final.adaln.b", final_adaln_b);
    visit("head.w", head_w);
    visit("head.b", head_b);
}

void BackboneParams::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<BackboneParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { fn(name, t); });
}

void Workspace::configure(const BackboneConfig& cfg, int b, int l) {
    if (batch == b && length == l && !blocks.empty() &&
        blocks.size() == static_cast<std::size_t>(cfg.depth) &&
        logits.numel() == static_cast<std::size_t>(b) * l * cfg.v_total &&
        emb.numel() == static_cast<std::size_t>(b) * l * cfg.width)
        return;
    batch = b;
    length = l;
    const std::size_t B = b, L = l, W = cfg.width, V = cfg.v_total;
    const std::size_t F = 4 * W, H = cfg.heads;
    emb.reset({B, L, W});
    time_feat.reset({B, W});
    time_pre.reset({B, W});
    time_act.reset({B, W});
    cvec.reset({B, W});
    silu_c.reset({B, W});
    blocks.assign(cfg.depth, BlockActs{});
    for (auto& a : blocks) {
        a.x_in.reset({B, L, W});
        a.mod.reset({B, 6 * W});
        a.ln1_xhat.reset({B, L, W});
        a.ln1_rstd.reset({B, L});
        a.a_mod.reset({B, L, W});
        a.qkv.reset({B, L, 3 * W});
        a.att_p.reset({B, H, L, L});
        a.ctx.reset({B, L, W});
        a.attn_out.reset({B, L, W});
        a.x_mid.reset({B, L, W});
        a.ln2_xhat.reset({B, L, W});
        a.ln2_rstd.reset({B, L});
        a.b_mod.reset({B, L, W});
        a.fc1_pre.reset({B, L, F});
        a.fc1_act.reset({B, L, F});
        a.mlp_out.reset({B, L, W});
    }
    trunk_out.reset({B, L, W});
    lnf_xhat.reset({B, L, W});
    lnf_rstd.reset({B, L});
    final_mod.reset({B, 2 * W});
    f_mod.reset({B, L, W});
    logits.reset({B, L, V});
    probs.reset({B, L, V});

    dx.reset({B, L, W});
    d_xmid.reset({B, L, W});
    d_res.reset({B, L, W});
    d_xhat.reset({B, L, W});
    d_amod.reset({B, L, W});
    d_qkv.reset({B, L, 3 * W});
    d_ctx.reset({B, L, W});
    d_attp.reset({B, H, L, L});
    d_fc1.reset({B, L, F});
    d_mod.reset({B, 6 * W});
    d_silu_c.reset({B, W});
    d_c.reset({B, W});
    d_final_mod.reset({B, 2 * W});
    d_time.reset({B, W});
}

Backbone::Backbone(BackboneConfig cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
    cfg_.validate();
    params_.init_shapes(cfg_);

    std::uint32_t pidx = 0;
    params_.for_each([&](const std::string& name, Tensor& t) {
        const bool zero_init = name.find("adaln") != std::string::npos ||
                               name == "head.w" || name == "head.b" ||
                               name.ends_with(".b");
        if (!zero_init) {
            for (std::size_t e = 0; e < t.numel(); ++e)
                t[e] = 0.02 * normal_at(init_seed, rng_stream::kParamInit,
                                        pidx, static_cast<std::uint32_t>(e), 0);
        }
        ++pidx;
    });
    ema_ = params_;
}

void Backbone::forward(const BackboneParams& p, const BatchInput& in,
                       Workspace& ws) const {
    const int B = in.batch, L = in.length, W = cfg_.width;
    const int V = cfg_.v_total, F = 4 * W;
    const std::size_t BL = static_cast<std::size_t>(B) * L;
    ws.configure(cfg_, B, L);

    // token + positional embeddings
    const int pe_w = cfg_.pe_width();
    const int D = cfg_.grid_dim;
    for (std::size_t idx = 0; idx < BL; ++idx) {
        const int tok = in.tokens[idx];
        if (tok < 0 || tok >= V)
            fail(ErrorKind::Domain, "token id out of range");
        double* row = ws.emb.ptr() + idx * W;
        const Coord pos = in.positions[idx];
        switch (cfg_.pe_mode) {
            case PeMode::Sinusoidal3D:
                std::fill(row, row + W, 0.0);
                if (!pos.is_pad()) positional_encoding_3d(pos, pe_w, D, row);
                break;
            case PeMode::LearnedCoord:
                if (pos.is_pad()) {
                    std::fill(row, row + W, 0.0);
                } else {
                    if (pos.x >= D || pos.y >= D || pos.z >= D)
                        fail(ErrorKind::Domain, "position outside grid");
                    std::size_t key =
                        (static_cast<std::size_t>(pos.x) * D + pos.y) * D +
                        pos.z;
                    std::memcpy(row, p.pe_table.ptr() + key * W,
                                W * sizeof(double));
                }
                break;
            case PeMode::LearnedSlot: {
                std::size_t slot = idx % L;
                std::memcpy(row, p.pe_table.ptr() + slot * W,
                            W * sizeof(double));
                break;
            }
        }
        const double* te = p.tok_emb.ptr() + static_cast<std::size_t>(tok) * W;
        for (int j = 0; j < W; ++j) row[j] += te[j];
    }

    // time conditioning vector
    if (cfg_.time_conditioning) {
        for (int b = 0; b < B; ++b)
            time_features(in.times[b], W, ws.time_feat.ptr() + static_cast<std::size_t>(b) * W);
        matmul(ws.time_feat.ptr(), p.time_fc1_w.ptr(), ws.time_pre.ptr(), B, W, W);
        add_bias(ws.time_pre.ptr(), p.time_fc1_b.ptr(), B, W);
        for (std::size_t i = 0; i < ws.time_pre.numel(); ++i)
            ws.time_act[i] = silu(ws.time_pre[i]);
        matmul(ws.time_act.ptr(), p.time_fc2_w.ptr(), ws.cvec.ptr(), B, W, W);
        add_bias(ws.cvec.ptr(), p.time_fc2_b.ptr(), B, W);
        for (std::size_t i = 0; i < ws.cvec.numel(); ++i)
            ws.silu_c[i] = silu(ws.cvec[i]);
    }

    std::memcpy(ws.blocks[0].x_in.ptr(), ws.emb.ptr(),
                ws.emb.numel() * sizeof(double));

    for (int blk = 0; blk < cfg_.depth; ++blk) {
        auto& a = ws.blocks[blk];
        const auto& bp = p.blocks[blk];

        if (cfg_.time_conditioning) {
            matmul(ws.silu_c.ptr(), bp.adaln_w.ptr(), a.mod.ptr(), B, W, 6 * W);
            add_bias(a.mod.ptr(), bp.adaln_b.ptr(), B, 6 * W);
        } else {
            a.mod.zero();
        }

        layernorm_forward(a.x_in.ptr(), a.ln1_xhat.ptr(), a.ln1_rstd.ptr(), BL, W);
        modulate_forward(a.ln1_xhat.ptr(), a.mod.ptr(), 0, 1, a.a_mod.ptr(), B, L, W);

        matmul(a.a_mod.ptr(), bp.qkv_w.ptr(), a.qkv.ptr(), BL, W, 3 * W);
        add_bias(a.qkv.ptr(), bp.qkv_b.ptr(), BL, 3 * W);
        attention_forward(a.qkv.ptr(), a.att_p.ptr(), a.ctx.ptr(), B, L, W,
                          cfg_.heads, cfg_.causal);
        matmul(a.ctx.ptr(), bp.proj_w.ptr(), a.attn_out.ptr(), BL, W, W);
        add_bias(a.attn_out.ptr(), bp.proj_b.ptr(), BL, W);

        gated_residual_forward(a.x_in.ptr(), a.attn_out.ptr(), a.mod.ptr(), 2,
                               a.x_mid.ptr(), B, L, W);

        layernorm_forward(a.x_mid.ptr(), a.ln2_xhat.ptr(), a.ln2_rstd.ptr(), BL, W);
        modulate_forward(a.ln2_xhat.ptr(), a.mod.ptr(), 3, 4, a.b_mod.ptr(), B, L, W);

        matmul(a.b_mod.ptr(), bp.fc1_w.ptr(), a.fc1_pre.ptr(), BL, W, F);
        add_bias(a.fc1_pre.ptr(), bp.fc1_b.ptr(), BL, F);
        for (std::size_t i = 0; i < a.fc1_pre.numel(); ++i)
            a.fc1_act[i] = gelu(a.fc1_pre[i]);
        matmul(a.fc1_act.ptr(), bp.fc2_w.ptr(), a.mlp_out.ptr(), BL, F, W);
        add_bias(a.mlp_out.ptr(), bp.fc2_b.ptr(), BL, W);

        Tensor& xout =
            (blk + 1 < cfg_.depth) ? ws.blocks[blk + 1].x_in : ws.trunk_out;
        gated_residual_forward(a.x_mid.ptr(), a.mlp_out.ptr(), a.mod.ptr(), 5,
                               xout.ptr(), B, L, W);
        check_finite(xout, "block " + std::to_string(blk) + " output");
    }

    layernorm_forward(ws.trunk_out.ptr(), ws.lnf_xhat.ptr(), ws.lnf_rstd.ptr(), BL, W);
    if (cfg_.time_conditioning) {
        matmul(ws.silu_c.ptr(), p.final_adaln_w.ptr(), ws.final_mod.ptr(), B, W, 2 * W);
        add_bias(ws.final_mod.ptr(), p.final_adaln_b.ptr(), B, 2 * W);
        // final modulation reuses the (shift, scale) layout with stride 2
        for (int b = 0; b < B; ++b) {
            const double* sh = ws.final_mod.ptr() + static_cast<std::size_t>(b) * 2 * W;
            const double* sc = sh + W;
            for (int l = 0; l < L; ++l) {
                std::size_t off = (static_cast<std::size_t>(b) * L + l) * W;
                for (int j = 0; j < W; ++j)
                    ws.f_mod[off + j] =
                        ws.lnf_xhat[off + j] * (1.0 + sc[j]) + sh[j];
            }
        }
    } else {
        std::memcpy(ws.f_mod.ptr(), ws.lnf_xhat.ptr(),
                    ws.lnf_xhat.numel() * sizeof(double));
    }

    matmul(ws.f_mod.ptr(), p.head_w.ptr(), ws.logits.ptr(), BL, W, V);
    add_bias(ws.logits.ptr(), p.head_b.ptr(), BL, V);
    check_finite(ws.logits, "output head");

    // per-slot distributions: MASK excluded from the softmax support, and
    // in the diffusion configuration non-MASK inputs carry over unchanged
    const int mask_id = cfg_.specials().mask();
    const bool carry = !cfg_.causal;
    for (std::size_t idx = 0; idx < BL; ++idx) {
        const double* lg = ws.logits.ptr() + idx * V;
        double* pr = ws.probs.ptr() + idx * V;
        const int tok = in.tokens[idx];
        if (carry && tok != mask_id) {
            std::fill(pr, pr + V, 0.0);
            pr[tok] = 1.0;
            continue;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < V; ++v)
            if (v != mask_id) mx = std::max(mx, lg[v]);
        double sum = 0.0;
        for (int v = 0; v < V; ++v) {
            if (v == mask_id) {
                pr[v] = 0.0;
            } else {
                pr[v] = std::exp(lg[v] - mx);
                sum += pr[v];
            }
        }
        const double inv = 1.0 / sum;
        for (int v = 0; v < V; ++v) pr[v] *= inv;
    }
}

void Backbone::backward(const BackboneParams& p, const BatchInput& in,
                        const Tensor& dlogits, Workspace& ws,
                        BackboneParams& grads) const {
    const int B = in.batch, L = in.length, W = cfg_.width;
    const int V = cfg_.v_total, F = 4 * W;
    const std::size_t BL = static_cast<std::size_t>(B) * L;

    // head
    matmul_tn(ws.f_mod.ptr(), dlogits.ptr(), grads.head_w.ptr(), W, BL, V, true);
    add_colsum(dlogits.ptr(), grads.head_b.ptr(), BL, V);
    matmul_nt(dlogits.ptr(), p.head_w.ptr(), ws.d_res.ptr(), BL, V, W);
    // ws.d_res now holds d(f_mod)

    if (cfg_.time_conditioning) {
        ws.d_final_mod.zero();
        ws.d_silu_c.zero();
        for (int b = 0; b < B; ++b) {
            const double* sc =
                ws.final_mod.ptr() + static_cast<std::size_t>(b) * 2 * W + W;
            double* dsh = ws.d_final_mod.ptr() + static_cast<std::size_t>(b) * 2 * W;
            double* dsc = dsh + W;
            for (int l = 0; l < L; ++l) {
                std::size_t off = (static_cast<std::size_t>(b) * L + l) * W;
                for (int j = 0; j < W; ++j) {
                    const double d = ws.d_res[off + j];
                    dsh[j] += d;
                    dsc[j] += d * ws.lnf_xhat[off + j];
                    ws.d_xhat[off + j] = d * (1.0 + sc[j]);
                }
            }
        }
        matmul_tn(ws.silu_c.ptr(), ws.d_final_mod.ptr(), grads.final_adaln_w.ptr(),
                  W, B, 2 * W, true);
        add_colsum(ws.d_final_mod.ptr(), grads.final_adaln_b.ptr(), B, 2 * W);
        matmul_nt(ws.d_final_mod.ptr(), p.final_adaln_w.ptr(), ws.d_silu_c.ptr(),
                  B, 2 * W, W, true);
    } else {
        std::memcpy(ws.d_xhat.ptr(), ws.d_res.ptr(), BL * W * sizeof(double));
    }

    ws.dx.zero();
    layernorm_backward(ws.d_xhat.ptr(), ws.lnf_xhat.ptr(), ws.lnf_rstd.ptr(),
                       ws.dx.ptr(), BL, W);

    for (int blk = cfg_.depth - 1; blk >= 0; --blk) {
        auto& a = ws.blocks[blk];
        const auto& bp = p.blocks[blk];
        auto& gp = grads.blocks[blk];
        ws.d_mod.zero();

        // second residual: d_xmid = dx, d_mlp (in d_res) = dx * (1+g2)
        gated_residual_backward(ws.dx.ptr(), a.mlp_out.ptr(), a.mod.ptr(), 5,
                                ws.d_xmid.ptr(), ws.d_res.ptr(), ws.d_mod.ptr(),
                                B, L, W);

        matmul_tn(a.fc1_act.ptr(), ws.d_res.ptr(), gp.fc2_w.ptr(), F, BL, W, true);
        add_colsum(ws.d_res.ptr(), gp.fc2_b.ptr(), BL, W);
        matmul_nt(ws.d_res.ptr(), p.blocks[blk].fc2_w.ptr(), ws.d_fc1.ptr(), BL, W, F);
        for (std::size_t i = 0; i < ws.d_fc1.numel(); ++i)
            ws.d_fc1[i] *= gelu_grad(a.fc1_pre[i]);
        matmul_tn(a.b_mod.ptr(), ws.d_fc1.ptr(), gp.fc1_w.ptr(), W, BL, F, true);
        add_colsum(ws.d_fc1.ptr(), gp.fc1_b.ptr(), BL, F);
        matmul_nt(ws.d_fc1.ptr(), bp.fc1_w.ptr(), ws.d_amod.ptr(), BL, F, W);

        modulate_backward(ws.d_amod.ptr(), a.ln2_xhat.ptr(), a.mod.ptr(), 3, 4,
                          ws.d_xhat.ptr(), ws.d_mod.ptr(), B, L, W);
        layernorm_backward(ws.d_xhat.ptr(), a.ln2_xhat.ptr(), a.ln2_rstd.ptr(),
                           ws.d_xmid.ptr(), BL, W);

        // first residual: dx (d_xin) = d_xmid, d_attn (d_res) = d_xmid * (1+g1)
        gated_residual_backward(ws.d_xmid.ptr(), a.attn_out.ptr(), a.mod.ptr(), 2,
                                ws.dx.ptr(), ws.d_res.ptr(), ws.d_mod.ptr(),
                                B, L, W);

        matmul_tn(a.ctx.ptr(), ws.d_res.ptr(), gp.proj_w.ptr(), W, BL, W, true);
        add_colsum(ws.d_res.ptr(), gp.proj_b.ptr(), BL, W);
        matmul_nt(ws.d_res.ptr(), bp.proj_w.ptr(), ws.d_ctx.ptr(), BL, W, W);

        ws.d_qkv.zero();
        attention_backward(a.qkv.ptr(), a.att_p.ptr(), ws.d_ctx.ptr(),
                           ws.d_qkv.ptr(), ws.d_attp.ptr(), B, L, W,
                           cfg_.heads, cfg_.causal);

        matmul_tn(a.a_mod.ptr(), ws.d_qkv.ptr(), gp.qkv_w.ptr(), W, BL, 3 * W, true);
        add_colsum(ws.d_qkv.ptr(), gp.qkv_b.ptr(), BL, 3 * W);
        matmul_nt(ws.d_qkv.ptr(), bp.qkv_w.ptr(), ws.d_amod.ptr(), BL, 3 * W, W);

        modulate_backward(ws.d_amod.ptr(), a.ln1_xhat.ptr(), a.mod.ptr(), 0, 1,
                          ws.d_xhat.ptr(), ws.d_mod.ptr(), B, L, W);
        layernorm_backward(ws.d_xhat.ptr(), a.ln1_xhat.ptr(), a.ln1_rstd.ptr(),
                           ws.dx.ptr(), BL, W);

        if (cfg_.time_conditioning) {
            matmul_tn(ws.silu_c.ptr(), ws.d_mod.ptr(), gp.adaln_w.ptr(), W, B,
                      6 * W, true);
            add_colsum(ws.d_mod.ptr(), gp.adaln_b.ptr(), B, 6 * W);
            matmul_nt(ws.d_mod.ptr(), bp.adaln_w.ptr(), ws.d_silu_c.ptr(), B,
                      6 * W, W, true);
        }
    }

    // embeddings
    const int D = cfg_.grid_dim;
    for (std::size_t idx = 0; idx < BL; ++idx) {
        const double* drow = ws.dx.ptr() + idx * W;
        double* gte = grads.tok_emb.ptr() +
                      static_cast<std::size_t>(in.tokens[idx]) * W;
        for (int j = 0; j < W; ++j) gte[j] += drow[j];
        if (cfg_.pe_mode == PeMode::LearnedCoord) {
            const Coord pos = in.positions[idx];
            if (!pos.is_pad()) {
                std::size_t key =
                    (static_cast<std::size_t>(pos.x) * D + pos.y) * D + pos.z;
                double* gpe = grads.pe_table.ptr() + key * W;
                for (int j = 0; j < W; ++j) gpe[j] += drow[j];
            }
        } else if (cfg_.pe_mode == PeMode::LearnedSlot) {
            double* gpe = grads.pe_table.ptr() + (idx % L) * W;
            for (int j = 0; j < W; ++j) gpe[j] += drow[j];
        }
    }

    // time MLP
    if (cfg_.time_conditioning) {
        for (std::size_t i = 0; i < ws.d_c.numel(); ++i)
            ws.d_c[i] = ws.d_silu_c[i] * silu_grad(ws.cvec[i]);
        matmul_tn(ws.time_act.ptr(), ws.d_c.ptr(), grads.time_fc2_w.ptr(), W, B, W, true);
        add_colsum(ws.d_c.ptr(), grads.time_fc2_b.ptr(), B, W);
        matmul_nt(ws.d_c.ptr(), p.time_fc2_w.ptr(), ws.d_time.ptr(), B, W, W);
        for (std::size_t i = 0; i < ws.d_time.numel(); ++i)
            ws.d_time[i] *= silu_grad(ws.time_pre[i]);
        matmul_tn(ws.time_feat.ptr(), ws.d_time.ptr(), grads.time_fc1_w.ptr(), W, B, W, true);
        add_colsum(ws.d_time.ptr(), grads.time_fc1_b.ptr(), B, W);
    }
}

void BackboneDenoiser::predict(const std::vector<int>& tokens,
                               const std::vector<Coord>& positions, double t,
                               double* probs) const {
    if (net_->config().causal)
        fail(ErrorKind::Domain,
             "the causal baseline is not a diffusion denoiser");
    in_.batch = 1;
    in_.length = static_cast<int>(tokens.size());
    in_.tokens = tokens;
    in_.positions = positions;
    in_.times.assign(1, t);
    net_->forward(*params_, in_, ws_);
    std::memcpy(probs, ws_.probs.ptr(), ws_.probs.numel() * sizeof(double));
}

}  // namespace scaffold
