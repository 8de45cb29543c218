#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

#include "modim/common.hpp"

namespace modim::blocks {

enum class BlockKind { Conv, ResConv, Vit, Swin, Mamba, ResSwin, ResMamba };

BlockKind block_kind_from_string(const std::string& s);
std::string to_string(BlockKind k);

// ---------------------------------------------------------------------------
// Window machinery (shared by SwinBlock / ViTBlock)
// ---------------------------------------------------------------------------

struct WindowSpec {
    std::vector<int64_t> window;  // per-axis window size
    std::vector<int64_t> shift;   // per-axis, 0 <= shift < window

    void validate(int64_t rank) const;
};

// Result of partitioning a (B, C, d1..dk) grid into windows of tokens.
// `tokens` is (B * num_windows, tokens_per_window, C). `key_mask` marks real
// tokens; positions introduced by padding are false and are masked with -inf
// before the attention softmax.
struct WindowedTokens {
    torch::Tensor tokens;
    torch::Tensor key_mask;  // (num_windows, tokens_per_window), bool
    std::vector<int64_t> orig_dims;
    std::vector<int64_t> padded_dims;
    WindowSpec spec;
    int64_t batch = 0;
    int64_t channels = 0;

    int64_t num_windows() const;
};

// Pads each spatial dim symmetrically to the next window multiple, applies the
// cyclic shift, and partitions into windows. window_reverse is its exact
// inverse (bit-exact round trip).
WindowedTokens window_partition(const torch::Tensor& x, const WindowSpec& w);
torch::Tensor window_reverse(const WindowedTokens& wt);

// Multi-head self-attention within windows, with a relative position bias
// table of size prod(2*w_i - 1) per head. No cross-window mixing.
class WindowAttention : public torch::nn::Module {
public:
    WindowAttention(int64_t channels, std::vector<int64_t> window, int64_t heads);

    // tokens: (B*nW, T, C); key_mask: (nW, T) bool or undefined.
    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& key_mask = {});

    int64_t heads() const { return heads_; }
    torch::Tensor relative_bias() const;  // (T, T, heads), from the table

private:
    int64_t channels_;
    int64_t heads_;
    std::vector<int64_t> window_;
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
    torch::Tensor bias_table_;      // (prod(2w-1), heads) parameter
    torch::Tensor relative_index_;  // (T*T,) buffer into the table
};

// ---------------------------------------------------------------------------
// Cross-scan / selective scan (SSM machinery)
// ---------------------------------------------------------------------------

// Flattens a (B, C, d1..dk) grid into 2*k axis-major sequences: one per
// spatial axis moved to the slowest-varying position, plus their reversals.
// Returns (B, K, C, L) with K = 2*k, L = prod(d).
torch::Tensor cross_scan(const torch::Tensor& x);

// Inverse of cross_scan under the mean-merge rule: with identity per-sequence
// transforms, cross_merge(cross_scan(x), dims) == x bit-exactly.
torch::Tensor cross_merge(const torch::Tensor& seqs, const std::vector<int64_t>& spatial_dims);

// Traversal orders used by cross_scan: (K, L) grid indices per sequence slot.
torch::Tensor cross_scan_indices(const std::vector<int64_t>& spatial_dims);

// Input-dependent discretized SSM recurrence over a batch of sequences:
//   h_t = exp(delta_t * A) . h_{t-1} + delta_t * B_t * u_t
//   y_t = C_t . h_t + D_skip * u_t
// Shapes: u, delta (B, D, L); A (D, N) (negative reals); Bm, Cm (B, N, L);
// d_skip (D). Sequential scan with a custom backward; no fused kernels.
torch::Tensor selective_scan(const torch::Tensor& u, const torch::Tensor& delta,
                             const torch::Tensor& A, const torch::Tensor& Bm,
                             const torch::Tensor& Cm, const torch::Tensor& d_skip);

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

class Block : public torch::nn::Module {
public:
    ~Block() override = default;
    virtual torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc) = 0;
    virtual int64_t out_channels() const = 0;
};

using BlockPtr = std::shared_ptr<Block>;

struct BlockOpts {
    int64_t rank = 2;
    int64_t channels = 0;       // input channels (== output for all but Conv)
    int64_t out_channels = 0;   // Conv only; 0 keeps `channels`
    int64_t ctx_dim = 0;        // 0 = context-free block
    // conv
    int64_t kernel = 3;
    bool activation = true;
    // attention
    std::vector<int64_t> window;  // per-axis; for Vit, the token-grid dims
    std::vector<int64_t> shift;   // per-axis; empty = no shift
    int64_t heads = 0;            // 0 = auto
    double drop_path = 0.1;
    int64_t mlp_ratio = 4;
    // ssm
    int64_t state_dim = 8;
    int64_t expand = 2;
    int64_t dt_rank = 0;  // 0 = ceil(channels * expand / 16)
};

// Output modulation out * Gate(t) + Bias(t) from a context vector, broadcast
// over spatial dims. Initialized to the identity (Gate = 1, Bias = 0).
class ContextGate : public torch::nn::Module {
public:
    ContextGate(int64_t ctx_dim, int64_t channels);
    torch::Tensor apply(const torch::Tensor& y, const torch::Tensor& t);
    int64_t ctx_dim() const { return ctx_dim_; }

private:
    int64_t ctx_dim_;
    torch::nn::Linear gate_{nullptr};
    torch::nn::Linear bias_{nullptr};
};

// Conv -> GroupNorm -> ReLU, with optional gate-bias context modulation.
class ConvBlock : public Block {
public:
    explicit ConvBlock(const BlockOpts& o);
    torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc) override;
    int64_t out_channels() const override { return out_channels_; }

private:
    int64_t rank_, in_channels_, out_channels_;
    bool activation_;
    torch::nn::AnyModule conv_;
    torch::nn::GroupNorm norm_{nullptr};
    std::shared_ptr<ContextGate> ctx_gate_;
};

// RL(x + F2(F1(x) + Proj(t))): two inner blocks of the given kind with a skip
// connection; the second inner conv block carries no activation.
class ResidualBlock : public Block {
public:
    ResidualBlock(BlockKind inner, const BlockOpts& o);
    torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc) override;
    int64_t out_channels() const override { return channels_; }

private:
    int64_t channels_;
    BlockPtr first_, second_;
    torch::nn::Linear ctx_proj_{nullptr};
};

// z = Drop(W-MSA(LN(x))) + x;  out = Drop(MLP(LN(z))) + z
class SwinBlock : public Block {
public:
    explicit SwinBlock(const BlockOpts& o);
    torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc) override;
    int64_t out_channels() const override { return channels_; }

private:
    int64_t rank_, channels_;
    WindowSpec spec_;
    double drop_path_;
    std::shared_ptr<WindowAttention> attn_;
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Linear mlp_fc1_{nullptr}, mlp_fc2_{nullptr};
    std::shared_ptr<ContextGate> ctx_gate_;
};

// SwinBlock whose window spans the full token grid: global MSA, no shift.
BlockPtr make_vit_block(const BlockOpts& o);

// w = Proj(LN(x)); z = Drop(Proj^-1(SSM(w) . MLP(w))) + x; out = Drop(MLP(z)) + z
// SSM runs the selective scan over all cross-scan directions and mean-merges.
class MambaBlock : public Block {
public:
    explicit MambaBlock(const BlockOpts& o);
    torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc) override;
    int64_t out_channels() const override { return channels_; }

private:
    torch::Tensor ssm(const torch::Tensor& w_grid);  // (B, D, d..) -> (B, D, d..)

    int64_t rank_, channels_, inner_, state_, dt_rank_, directions_;
    double drop_path_;
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear in_proj_{nullptr}, out_proj_{nullptr}, gate_proj_{nullptr};
    torch::nn::Linear mlp_fc1_{nullptr}, mlp_fc2_{nullptr};
    std::vector<torch::nn::Linear> x_proj_, dt_proj_;  // one per scan direction
    torch::Tensor a_log_, d_skip_;                     // (K, D, N), (K, D)
    std::shared_ptr<ContextGate> ctx_gate_;
};

BlockPtr make_block(BlockKind kind, const BlockOpts& o);

// Per-sample stochastic depth; identity in evaluation mode.
torch::Tensor drop_path(const torch::Tensor& x, double p, const RunCtx& rc);

// Largest group count <= min(8, channels) that divides channels.
int64_t gn_groups(int64_t channels);
int64_t auto_heads(int64_t channels);

}  // namespace modim::blocks
