#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scaffold/common.hpp"
#include "scaffold/tensor.hpp"

namespace scaffold {

enum class PeMode {
    Sinusoidal3D,  // fixed, one third of the width per axis
    LearnedCoord,  // trainable row per flattened voxel coordinate
    LearnedSlot,   // trainable row per sequence slot
};

const char* pe_mode_name(PeMode mode);
PeMode pe_mode_from_name(const std::string& name);

struct BackboneConfig {
    int depth = 12;
    int heads = 12;
    int width = 768;
    int seq_len = 1024;  // L
    int v_total = 0;     // |V| + MASK/PAD/BOS
    int grid_dim = 32;   // D
    PeMode pe_mode = PeMode::Sinusoidal3D;
    bool time_conditioning = true;
    bool causal = false;  // next-token baseline: causal attention, no time

    SpecialTokens specials() const noexcept { return SpecialTokens{v_total}; }
    int head_dim() const noexcept { return width / heads; }
    // Sinusoidal encodings use the largest multiple of 6 that fits the
    // width; any remaining dimensions stay zero.
    int pe_width() const noexcept { return 6 * (width / 6); }
    void validate() const;
};

// Fixed 3D sinusoidal encoding: the width splits into three equal thirds,
// one standard interleaved sin/cos encoding per axis. The PAD sentinel
// maps to the zero vector. width must be divisible by 6.
void positional_encoding_3d(Coord pos, int width, int grid_dim, double* out);

// Sinusoidal features of the diffusion time for the conditioning MLP.
void time_features(double t, int width, double* out);

struct BlockParams {
    Tensor adaln_w, adaln_b;  // [W,6W], [6W]; absent without time cond.
    Tensor qkv_w, qkv_b;      // [W,3W], [3W]
    Tensor proj_w, proj_b;    // [W,W], [W]
    Tensor fc1_w, fc1_b;      // [W,4W], [4W]
    Tensor fc2_w, fc2_b;      // [4W,W], [W]
};

// All weights of the denoiser. The same struct doubles as gradient storage,
// EMA shadow, and optimizer moment storage.
struct BackboneParams {
    Tensor tok_emb;   // [V, W]
    Tensor pe_table;  // learned modes only: [D^3, W] or [L, W]
    Tensor time_fc1_w, time_fc1_b, time_fc2_w, time_fc2_b;  // time cond. only
    std::vector<BlockParams> blocks;
    Tensor final_adaln_w, final_adaln_b;  // [W,2W], [2W]; time cond. only
    Tensor head_w, head_b;                // [W,V], [V]

    void init_shapes(const BackboneConfig& cfg);
    void zero();
    // Visits every non-empty tensor in a fixed registration order.
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(
        const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

// Per-call activation storage, reused across steps. Configure before use.
struct Workspace {
    int batch = 0, length = 0;

    Tensor emb;                          // [B,L,W]
    Tensor time_feat, time_pre, time_act, cvec, silu_c;  // [B,W]
    struct BlockActs {
        Tensor x_in;                     // [B,L,W]
        Tensor mod;                      // [B,6W]
        Tensor ln1_xhat, ln1_rstd;       // [B,L,W], [B,L]
        Tensor a_mod, qkv, att_p, ctx, attn_out;
        Tensor x_mid;
        Tensor ln2_xhat, ln2_rstd;
        Tensor b_mod, fc1_pre, fc1_act, mlp_out;
    };
    std::vector<BlockActs> blocks;
    Tensor trunk_out;                    // [B,L,W]
    Tensor lnf_xhat, lnf_rstd;
    Tensor final_mod;                    // [B,2W]
    Tensor f_mod;                        // [B,L,W]
    Tensor logits, probs;                // [B,L,V]

    // backward scratch
    Tensor dx, d_xmid, d_res, d_xhat, d_amod, d_qkv, d_ctx, d_attp, d_fc1,
        d_mod, d_silu_c, d_c, d_final_mod, d_time;

    void configure(const BackboneConfig& cfg, int batch, int length);
};

struct BatchInput {
    int batch = 0, length = 0;
    std::vector<int> tokens;       // [B*L]
    std::vector<Coord> positions;  // [B*L]
    std::vector<double> times;     // [B]; ignored without time conditioning
};

// Per-slot categorical distributions with zero MASK probability. In the
// diffusion configuration, slots whose input token is not MASK come back
// as a point mass on that token (carry-over); the causal configuration
// predicts at every slot and does not carry over.
class Denoiser {
  public:
    virtual ~Denoiser() = default;
    // probs has room for length * v_total doubles, row-major per slot.
    virtual void predict(const std::vector<int>& tokens,
                         const std::vector<Coord>& positions, double t,
                         double* probs) const = 0;
    virtual int v_total() const = 0;
    virtual int seq_len() const = 0;
};

class Backbone {
  public:
    Backbone(BackboneConfig cfg, std::uint64_t init_seed);

    const BackboneConfig& config() const noexcept { return cfg_; }
    BackboneParams& params() noexcept { return params_; }
    const BackboneParams& params() const noexcept { return params_; }
    BackboneParams& ema() noexcept { return ema_; }
    const BackboneParams& ema() const noexcept { return ema_; }

    // Fills ws.logits and ws.probs. Throws Numeric (naming the layer) on
    // non-finite activations.
    void forward(const BackboneParams& p, const BatchInput& in,
                 Workspace& ws) const;

    // Accumulates parameter gradients for d(loss)/d(logits). Must be called
    // with the workspace left by the matching forward().
    void backward(const BackboneParams& p, const BatchInput& in,
                  const Tensor& dlogits, Workspace& ws,
                  BackboneParams& grads) const;

  private:
    BackboneConfig cfg_;
    BackboneParams params_;
    BackboneParams ema_;
};

// Adapts one parameter set of a backbone to the Denoiser interface with a
// private single-sequence workspace. Not thread-safe; use one per thread.
class BackboneDenoiser : public Denoiser {
  public:
    BackboneDenoiser(const Backbone& net, const BackboneParams& p)
        : net_(&net), params_(&p) {}

    void predict(const std::vector<int>& tokens,
                 const std::vector<Coord>& positions, double t,
                 double* probs) const override;
    int v_total() const override { return net_->config().v_total; }
    int seq_len() const override { return net_->config().seq_len; }

  private:
    const Backbone* net_;
    const BackboneParams* params_;
    mutable Workspace ws_;
    mutable BatchInput in_;
};

}  // namespace scaffold
