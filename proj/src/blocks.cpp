#include "modim/blocks.hpp"

#include <algorithm>
#include <cmath>

namespace F = torch::nn::functional;

namespace modim::blocks {

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "conv") return BlockKind::Conv;
    if (s == "res_conv") return BlockKind::ResConv;
    if (s == "vit") return BlockKind::Vit;
    if (s == "swin") return BlockKind::Swin;
    if (s == "mamba") return BlockKind::Mamba;
    if (s == "res_swin") return BlockKind::ResSwin;
    if (s == "res_mamba") return BlockKind::ResMamba;
    throw ConfigError("unknown block kind: " + s);
}

std::string to_string(BlockKind k) {
    switch (k) {
        case BlockKind::Conv: return "conv";
        case BlockKind::ResConv: return "res_conv";
        case BlockKind::Vit: return "vit";
        case BlockKind::Swin: return "swin";
        case BlockKind::Mamba: return "mamba";
        case BlockKind::ResSwin: return "res_swin";
        case BlockKind::ResMamba: return "res_mamba";
    }
    return "?";
}

int64_t gn_groups(int64_t channels) {
    int64_t g = std::min<int64_t>(8, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
}

int64_t auto_heads(int64_t channels) {
    for (int64_t h : {8, 4, 2})
        if (channels % h == 0 && channels / h >= 8) return h;
    return 1;
}

torch::Tensor drop_path(const torch::Tensor& x, double p, const RunCtx& rc) {
    if (!rc.training || p <= 0.0) return x;
    TORCH_CHECK(p < 1.0, "drop-path probability must be in [0, 1)");
    TORCH_CHECK(rc.gen.defined(), "training forward with drop-path requires an RNG stream");
    std::vector<int64_t> shape(x.dim(), 1);
    shape[0] = x.size(0);
    auto keep = torch::bernoulli(torch::full(shape, 1.0 - p, x.options()), rc.gen);
    return x * keep / (1.0 - p);
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

void WindowSpec::validate(int64_t rank) const {
    if (static_cast<int64_t>(window.size()) != rank)
        throw ShapeError("window spec rank mismatch");
    if (!shift.empty() && static_cast<int64_t>(shift.size()) != rank)
        throw ShapeError("window shift rank mismatch");
    for (size_t i = 0; i < window.size(); ++i) {
        if (window[i] < 1) throw ShapeError("window size must be >= 1");
        int64_t s = shift.empty() ? 0 : shift[i];
        if (s < 0 || s >= window[i]) throw ShapeError("window shift must satisfy 0 <= shift < window");
    }
}

int64_t WindowedTokens::num_windows() const {
    int64_t n = 1;
    for (size_t i = 0; i < padded_dims.size(); ++i) n *= padded_dims[i] / spec.window[i];
    return n;
}

namespace {

std::vector<int64_t> pad_arg(const std::vector<int64_t>& dims, const std::vector<int64_t>& padded) {
    // F::pad wants (lo, hi) pairs starting from the last dim.
    std::vector<int64_t> arg;
    for (int64_t i = static_cast<int64_t>(dims.size()) - 1; i >= 0; --i) {
        int64_t total = padded[i] - dims[i];
        int64_t lo = total / 2;
        arg.push_back(lo);
        arg.push_back(total - lo);
    }
    return arg;
}

}  // namespace

WindowedTokens window_partition(const torch::Tensor& x, const WindowSpec& w) {
    const int64_t rank = spatial_rank_of(x);
    w.validate(rank);
    const auto dims = spatial_dims_of(x);
    const int64_t batch = x.size(0);
    const int64_t channels = x.size(1);

    std::vector<int64_t> padded(rank);
    bool pads = false;
    for (int64_t i = 0; i < rank; ++i) {
        padded[i] = (dims[i] + w.window[i] - 1) / w.window[i] * w.window[i];
        pads |= padded[i] != dims[i];
    }

    auto xp = x;
    auto mask = torch::ones(dims, x.options().dtype(torch::kFloat));
    if (pads) {
        auto arg = pad_arg(dims, padded);
        xp = F::pad(xp, F::PadFuncOptions(arg));
        mask = F::pad(mask, F::PadFuncOptions(arg));
    }

    bool shifted = false;
    for (int64_t s : w.shift) shifted |= s != 0;
    if (shifted) {
        std::vector<int64_t> sh, xdims, mdims;
        for (int64_t i = 0; i < rank; ++i) {
            sh.push_back(-w.shift[i]);
            xdims.push_back(i + 2);
            mdims.push_back(i);
        }
        xp = torch::roll(xp, sh, xdims);
        mask = torch::roll(mask, sh, mdims);
    }

    // (B, C, n1, w1, ..) -> (B, n1.., w1.., C) -> (B*nW, T, C)
    std::vector<int64_t> vs{batch, channels};
    int64_t n_windows = 1, tokens_per = 1;
    for (int64_t i = 0; i < rank; ++i) {
        vs.push_back(padded[i] / w.window[i]);
        vs.push_back(w.window[i]);
        n_windows *= padded[i] / w.window[i];
        tokens_per *= w.window[i];
    }
    std::vector<int64_t> perm{0};
    for (int64_t i = 0; i < rank; ++i) perm.push_back(2 + 2 * i);
    for (int64_t i = 0; i < rank; ++i) perm.push_back(3 + 2 * i);
    perm.push_back(1);

    WindowedTokens out;
    out.tokens = xp.view(vs).permute(perm).contiguous().view({batch * n_windows, tokens_per, channels});

    std::vector<int64_t> mvs, mperm;
    for (int64_t i = 0; i < rank; ++i) {
        mvs.push_back(padded[i] / w.window[i]);
        mvs.push_back(w.window[i]);
    }
    for (int64_t i = 0; i < rank; ++i) mperm.push_back(2 * i);
    for (int64_t i = 0; i < rank; ++i) mperm.push_back(2 * i + 1);
    out.key_mask = mask.view(mvs).permute(mperm).contiguous().view({n_windows, tokens_per}) > 0.5;

    out.orig_dims = dims;
    out.padded_dims = padded;
    out.spec = w;
    out.batch = batch;
    out.channels = channels;
    return out;
}

torch::Tensor window_reverse(const WindowedTokens& wt) {
    const int64_t rank = static_cast<int64_t>(wt.orig_dims.size());
    const auto& w = wt.spec;
    const int64_t batch = wt.batch;
    const int64_t channels = wt.tokens.size(2);

    std::vector<int64_t> vs{batch};
    for (int64_t i = 0; i < rank; ++i) vs.push_back(wt.padded_dims[i] / w.window[i]);
    for (int64_t i = 0; i < rank; ++i) vs.push_back(w.window[i]);
    vs.push_back(channels);

    std::vector<int64_t> perm{0, 1 + 2 * rank};
    for (int64_t i = 0; i < rank; ++i) {
        perm.push_back(1 + i);
        perm.push_back(1 + rank + i);
    }

    std::vector<int64_t> gshape{batch, channels};
    for (int64_t d : wt.padded_dims) gshape.push_back(d);
    auto grid = wt.tokens.view(vs).permute(perm).contiguous().view(gshape);

    bool shifted = false;
    for (int64_t s : w.shift) shifted |= s != 0;
    if (shifted) {
        std::vector<int64_t> sh, xdims;
        for (int64_t i = 0; i < rank; ++i) {
            sh.push_back(w.shift[i]);
            xdims.push_back(i + 2);
        }
        grid = torch::roll(grid, sh, xdims);
    }

    for (int64_t i = 0; i < rank; ++i) {
        if (wt.padded_dims[i] != wt.orig_dims[i]) {
            int64_t lo = (wt.padded_dims[i] - wt.orig_dims[i]) / 2;
            grid = grid.narrow(i + 2, lo, wt.orig_dims[i]);
        }
    }
    return grid.contiguous();
}

// ---------------------------------------------------------------------------
// Window attention
// ---------------------------------------------------------------------------

WindowAttention::WindowAttention(int64_t channels, std::vector<int64_t> window, int64_t heads)
    : channels_(channels), heads_(heads > 0 ? heads : auto_heads(channels)), window_(std::move(window)) {
    TORCH_CHECK(channels_ % heads_ == 0, "embed dim ", channels_, " not divisible by heads ", heads_);
    qkv_ = register_module("qkv", torch::nn::Linear(channels_, channels_ * 3));
    proj_ = register_module("proj", torch::nn::Linear(channels_, channels_));

    int64_t table = 1;
    for (int64_t wi : window_) table *= 2 * wi - 1;
    bias_table_ = register_parameter("relative_bias_table", torch::zeros({table, heads_}));
    torch::nn::init::normal_(bias_table_, 0.0, 0.02);

    // Pairwise relative offsets, linearized into the bias table.
    const int64_t rank = static_cast<int64_t>(window_.size());
    std::vector<torch::Tensor> axes;
    for (int64_t wi : window_) axes.push_back(torch::arange(wi, torch::kLong));
    auto grids = torch::meshgrid(axes, "ij");
    std::vector<torch::Tensor> flat;
    for (auto& g : grids) flat.push_back(g.reshape({-1}));
    auto coords = torch::stack(flat, 0);  // (rank, T)
    auto rel = coords.unsqueeze(2) - coords.unsqueeze(1);  // (rank, T, T)
    torch::Tensor index = torch::zeros({rel.size(1), rel.size(2)}, torch::kLong);
    int64_t stride = 1;
    for (int64_t i = rank - 1; i >= 0; --i) {
        index += (rel[i] + window_[i] - 1) * stride;
        stride *= 2 * window_[i] - 1;
    }
    // kept unregistered: it is reconstructed from the window dims, and an
    // integral buffer would be clobbered by Module::to(dtype)
    relative_index_ = index.reshape({-1});
}

torch::Tensor WindowAttention::relative_bias() const {
    const int64_t t = static_cast<int64_t>(std::sqrt(static_cast<double>(relative_index_.size(0))) + 0.5);
    return bias_table_.index_select(0, relative_index_).view({t, t, heads_});
}

torch::Tensor WindowAttention::forward(const torch::Tensor& tokens, const torch::Tensor& key_mask) {
    const int64_t bn = tokens.size(0);
    const int64_t t = tokens.size(1);
    const int64_t c = tokens.size(2);
    TORCH_CHECK(c == channels_, "window attention channel mismatch");
    TORCH_CHECK(t * t == relative_index_.size(0), "token count does not match window spec");
    const int64_t hd = channels_ / heads_;

    auto qkv = qkv_(tokens).reshape({bn, t, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0], k = qkv[1], v = qkv[2];  // (bn, heads, T, hd)

    auto attn = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
    auto bias = bias_table_.index_select(0, relative_index_)
                    .view({t, t, heads_})
                    .permute({2, 0, 1});  // (heads, T, T)
    attn = attn + bias.unsqueeze(0);

    if (key_mask.defined() && !key_mask.all().item<bool>()) {
        const int64_t nw = key_mask.size(0);
        TORCH_CHECK(bn % nw == 0, "key mask window count mismatch");
        attn = attn.view({bn / nw, nw, heads_, t, t});
        auto km = key_mask.view({1, nw, 1, 1, t});
        attn = attn.masked_fill(km.logical_not(), -std::numeric_limits<double>::infinity());
        attn = attn.view({bn, heads_, t, t});
    }

    attn = torch::softmax(attn, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({bn, t, c});
    return proj_(out);
}

// ---------------------------------------------------------------------------
// Cross scan
// ---------------------------------------------------------------------------

torch::Tensor cross_scan_indices(const std::vector<int64_t>& spatial_dims) {
    const int64_t rank = static_cast<int64_t>(spatial_dims.size());
    const int64_t len = prod(spatial_dims);
    auto base = torch::arange(len, torch::kLong).view(spatial_dims);
    std::vector<torch::Tensor> idx;
    for (int64_t j = 0; j < rank; ++j) {
        std::vector<int64_t> perm{j};
        for (int64_t a = 0; a < rank; ++a)
            if (a != j) perm.push_back(a);
        auto order = base.permute(perm).reshape({len});
        idx.push_back(order);
        idx.push_back(order.flip(0));
    }
    return torch::stack(idx, 0);  // (K, L)
}

torch::Tensor cross_scan(const torch::Tensor& x) {
    const auto dims = spatial_dims_of(x);
    const int64_t len = prod(dims);
    auto flat = x.flatten(2);  // (B, C, L)
    auto idx = cross_scan_indices(dims);
    std::vector<torch::Tensor> seqs;
    for (int64_t k = 0; k < idx.size(0); ++k) seqs.push_back(flat.index_select(2, idx[k]));
    return torch::stack(seqs, 1);  // (B, K, C, L)
}

torch::Tensor cross_merge(const torch::Tensor& seqs, const std::vector<int64_t>& spatial_dims) {
    const int64_t len = prod(spatial_dims);
    TORCH_CHECK(seqs.dim() == 4, "cross_merge expects (B, K, C, L)");
    TORCH_CHECK(seqs.size(3) == len, "cross_merge sequence length mismatch: got ", seqs.size(3),
                ", expected ", len);
    const int64_t k_dirs = seqs.size(1);
    TORCH_CHECK(k_dirs == 2 * static_cast<int64_t>(spatial_dims.size()),
                "cross_merge direction count mismatch");
    auto idx = cross_scan_indices(spatial_dims);
    std::vector<torch::Tensor> natural;
    for (int64_t k = 0; k < k_dirs; ++k) {
        auto inv = torch::argsort(idx[k]);
        natural.push_back(seqs.select(1, k).index_select(2, inv));
    }
    // Mean that is exact when all sequences agree: y0 + sum(yk - y0) / K.
    auto y0 = natural[0];
    torch::Tensor acc = torch::zeros_like(y0);
    for (int64_t k = 1; k < k_dirs; ++k) acc = acc + (natural[k] - y0);
    auto merged = y0 + acc / static_cast<double>(k_dirs);
    std::vector<int64_t> shape{seqs.size(0), seqs.size(2)};
    shape.insert(shape.end(), spatial_dims.begin(), spatial_dims.end());
    return merged.view(shape);
}

// ---------------------------------------------------------------------------
// ContextGate
// ---------------------------------------------------------------------------

ContextGate::ContextGate(int64_t ctx_dim, int64_t channels) : ctx_dim_(ctx_dim) {
    gate_ = register_module("gate", torch::nn::Linear(ctx_dim, channels));
    bias_ = register_module("bias", torch::nn::Linear(ctx_dim, channels));
    torch::nn::init::zeros_(gate_->weight);
    torch::nn::init::ones_(gate_->bias);
    torch::nn::init::zeros_(bias_->weight);
    torch::nn::init::zeros_(bias_->bias);
}

torch::Tensor ContextGate::apply(const torch::Tensor& y, const torch::Tensor& t) {
    if (t.size(1) != ctx_dim_)
        throw ShapeError("context width mismatch: expected " + std::to_string(ctx_dim_) + ", got " +
                         std::to_string(t.size(1)));
    auto g = gate_(t);
    auto b = bias_(t);
    while (g.dim() < y.dim()) {
        g = g.unsqueeze(-1);
        b = b.unsqueeze(-1);
    }
    return y * g + b;
}

// ---------------------------------------------------------------------------
// ConvBlock
// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(const BlockOpts& o)
    : rank_(o.rank),
      in_channels_(o.channels),
      out_channels_(o.out_channels > 0 ? o.out_channels : o.channels),
      activation_(o.activation) {
    TORCH_CHECK(in_channels_ > 0, "conv block needs channels");
    const int64_t pad = o.kernel / 2;
    if (rank_ == 2) {
        auto conv = torch::nn::Conv2d(
            torch::nn::Conv2dOptions(in_channels_, out_channels_, o.kernel).padding(pad));
        register_module("conv", conv.ptr());
        conv_ = torch::nn::AnyModule(conv);
    } else if (rank_ == 3) {
        auto conv = torch::nn::Conv3d(
            torch::nn::Conv3dOptions(in_channels_, out_channels_, o.kernel).padding(pad));
        register_module("conv", conv.ptr());
        conv_ = torch::nn::AnyModule(conv);
    } else {
        throw ConfigError("conv block rank must be 2 or 3");
    }
    norm_ = register_module(
        "norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(gn_groups(out_channels_), out_channels_)));
    if (o.ctx_dim > 0)
        ctx_gate_ = register_module("ctx_gate", std::make_shared<ContextGate>(o.ctx_dim, out_channels_));
}

torch::Tensor ConvBlock::forward(const torch::Tensor& x, const RunCtx& rc) {
    check_patch_grid(x, rank_, in_channels_);
    auto y = conv_.forward(x);
    y = norm_(y);
    if (activation_) y = torch::relu(y);
    if (ctx_gate_ && rc.has_ctx()) y = ctx_gate_->apply(y, rc.ctx);
    return y;
}

// ---------------------------------------------------------------------------
// ResidualBlock
// ---------------------------------------------------------------------------

ResidualBlock::ResidualBlock(BlockKind inner, const BlockOpts& o) : channels_(o.channels) {
    TORCH_CHECK(o.out_channels == 0 || o.out_channels == o.channels,
                "residual block requires equal input/output channels");
    BlockOpts io = o;
    io.ctx_dim = 0;  // context enters through Proj(t) between the sub-blocks
    io.out_channels = o.channels;
    switch (inner) {
        case BlockKind::Conv: {
            io.activation = true;
            first_ = std::make_shared<ConvBlock>(io);
            io.activation = false;  // second sub-block has no activation
            second_ = std::make_shared<ConvBlock>(io);
            break;
        }
        case BlockKind::Swin:
            first_ = std::make_shared<SwinBlock>(io);
            second_ = std::make_shared<SwinBlock>(io);
            break;
        case BlockKind::Mamba:
            first_ = std::make_shared<MambaBlock>(io);
            second_ = std::make_shared<MambaBlock>(io);
            break;
        default:
            throw ConfigError("residual wrapper supports conv, swin or mamba inner blocks");
    }
    register_module("first", first_);
    register_module("second", second_);
    if (o.ctx_dim > 0)
        ctx_proj_ = register_module("ctx_proj", torch::nn::Linear(o.ctx_dim, o.channels));
}

torch::Tensor ResidualBlock::forward(const torch::Tensor& x, const RunCtx& rc) {
    check_patch_grid(x, spatial_rank_of(x), channels_);
    auto h = first_->forward(x, rc);
    if (ctx_proj_ && rc.has_ctx()) {
        auto p = ctx_proj_(rc.ctx);
        while (p.dim() < h.dim()) p = p.unsqueeze(-1);
        h = h + p;
    }
    h = second_->forward(h, rc);
    return torch::relu(x + h);
}

// ---------------------------------------------------------------------------
// SwinBlock
// ---------------------------------------------------------------------------

SwinBlock::SwinBlock(const BlockOpts& o) : rank_(o.rank), channels_(o.channels), drop_path_(o.drop_path) {
    TORCH_CHECK(channels_ > 0, "swin block needs channels");
    TORCH_CHECK(!o.window.empty(), "swin block needs a window spec");
    spec_.window = o.window;
    spec_.shift = o.shift.empty() ? std::vector<int64_t>(o.window.size(), 0) : o.shift;
    spec_.validate(rank_);
    TORCH_CHECK(drop_path_ >= 0.0 && drop_path_ < 1.0, "drop-path probability must be in [0, 1)");

    attn_ = register_module("attn", std::make_shared<WindowAttention>(channels_, spec_.window, o.heads));
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels_})));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels_})));
    mlp_fc1_ = register_module("mlp_fc1", torch::nn::Linear(channels_, channels_ * o.mlp_ratio));
    mlp_fc2_ = register_module("mlp_fc2", torch::nn::Linear(channels_ * o.mlp_ratio, channels_));
    if (o.ctx_dim > 0)
        ctx_gate_ = register_module("ctx_gate", std::make_shared<ContextGate>(o.ctx_dim, channels_));
}

torch::Tensor SwinBlock::forward(const torch::Tensor& x, const RunCtx& rc) {
    check_patch_grid(x, rank_, channels_);
    const auto sizes = x.sizes().vec();
    auto t = x.flatten(2).transpose(1, 2);  // (B, L, C)

    auto a = norm1_(t);
    auto grid = a.transpose(1, 2).reshape(sizes);
    auto wt = window_partition(grid, spec_);
    bool needs_mask = !wt.key_mask.all().item<bool>();
    wt.tokens = attn_->forward(wt.tokens, needs_mask ? wt.key_mask : torch::Tensor());
    auto o = window_reverse(wt).flatten(2).transpose(1, 2);
    t = t + drop_path(o, drop_path_, rc);

    auto m = mlp_fc2_(torch::gelu(mlp_fc1_(norm2_(t))));
    t = t + drop_path(m, drop_path_, rc);

    auto y = t.transpose(1, 2).reshape(sizes);
    if (ctx_gate_ && rc.has_ctx()) y = ctx_gate_->apply(y, rc.ctx);
    return y;
}

BlockPtr make_vit_block(const BlockOpts& o) {
    TORCH_CHECK(!o.window.empty(), "vit block needs the token-grid dims as its window");
    BlockOpts vo = o;
    vo.shift.assign(vo.window.size(), 0);
    vo.drop_path = o.drop_path;
    return std::make_shared<SwinBlock>(vo);
}

// ---------------------------------------------------------------------------
// MambaBlock
// ---------------------------------------------------------------------------

MambaBlock::MambaBlock(const BlockOpts& o)
    : rank_(o.rank),
      channels_(o.channels),
      inner_(o.channels * o.expand),
      state_(o.state_dim),
      dt_rank_(o.dt_rank > 0 ? o.dt_rank : std::max<int64_t>(1, (inner_ + 15) / 16)),
      directions_(2 * o.rank),
      drop_path_(o.drop_path) {
    TORCH_CHECK(channels_ > 0, "mamba block needs channels");
    TORCH_CHECK(state_ >= 1, "state_dim must be >= 1");
    TORCH_CHECK(drop_path_ >= 0.0 && drop_path_ < 1.0, "drop-path probability must be in [0, 1)");

    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels_})));
    in_proj_ = register_module("in_proj", torch::nn::Linear(channels_, inner_));
    out_proj_ = register_module("out_proj", torch::nn::Linear(inner_, channels_));
    gate_proj_ = register_module("gate_proj", torch::nn::Linear(inner_, inner_));
    mlp_fc1_ = register_module("mlp_fc1", torch::nn::Linear(channels_, channels_ * o.mlp_ratio));
    mlp_fc2_ = register_module("mlp_fc2", torch::nn::Linear(channels_ * o.mlp_ratio, channels_));

    for (int64_t k = 0; k < directions_; ++k) {
        auto xp = torch::nn::Linear(
            torch::nn::LinearOptions(inner_, dt_rank_ + 2 * state_).bias(false));
        auto dp = torch::nn::Linear(dt_rank_, inner_);
        x_proj_.push_back(register_module("x_proj_" + std::to_string(k), xp));
        dt_proj_.push_back(register_module("dt_proj_" + std::to_string(k), dp));
        // softplus(dt bias) lands in roughly [1e-3, 1e-1]
        torch::NoGradGuard ng;
        dp->bias.uniform_(std::log(std::expm1(1e-3)), std::log(std::expm1(1e-1)));
    }

    auto a_init = torch::log(torch::arange(1, state_ + 1, torch::kFloat))
                      .view({1, 1, state_})
                      .repeat({directions_, inner_, 1});
    a_log_ = register_parameter("a_log", a_init);
    d_skip_ = register_parameter("d_skip", torch::ones({directions_, inner_}));

    if (o.ctx_dim > 0)
        ctx_gate_ = register_module("ctx_gate", std::make_shared<ContextGate>(o.ctx_dim, channels_));
}

torch::Tensor MambaBlock::ssm(const torch::Tensor& w_grid) {
    const auto dims = spatial_dims_of(w_grid);
    auto seqs = cross_scan(w_grid);  // (B, K, D, L)
    std::vector<torch::Tensor> ys;
    for (int64_t k = 0; k < directions_; ++k) {
        auto u = seqs.select(1, k);                       // (B, D, L)
        auto proj = x_proj_[static_cast<size_t>(k)](u.transpose(1, 2));  // (B, L, dtr+2N)
        auto dt = proj.narrow(2, 0, dt_rank_);
        auto bm = proj.narrow(2, dt_rank_, state_).transpose(1, 2);          // (B, N, L)
        auto cm = proj.narrow(2, dt_rank_ + state_, state_).transpose(1, 2); // (B, N, L)
        auto delta = torch::softplus(dt_proj_[static_cast<size_t>(k)](dt)).transpose(1, 2);  // (B, D, L)
        auto a = -torch::exp(a_log_.select(0, k));  // (D, N)
        ys.push_back(selective_scan(u, delta, a, bm, cm, d_skip_.select(0, k)));
    }
    return cross_merge(torch::stack(ys, 1), dims);
}

torch::Tensor MambaBlock::forward(const torch::Tensor& x, const RunCtx& rc) {
    check_patch_grid(x, rank_, channels_);
    const auto sizes = x.sizes().vec();
    const int64_t batch = x.size(0);
    auto t = x.flatten(2).transpose(1, 2);  // (B, L, C)

    auto w = in_proj_(norm_(t));  // (B, L, D)
    std::vector<int64_t> gshape{batch, inner_};
    gshape.insert(gshape.end(), sizes.begin() + 2, sizes.end());
    auto w_grid = w.transpose(1, 2).reshape(gshape);
    auto y = ssm(w_grid).flatten(2).transpose(1, 2);  // (B, L, D)

    auto g = torch::silu(gate_proj_(w));
    auto z = t + drop_path(out_proj_(y * g), drop_path_, rc);
    auto m = mlp_fc2_(torch::gelu(mlp_fc1_(z)));
    z = z + drop_path(m, drop_path_, rc);

    auto out = z.transpose(1, 2).reshape(sizes);
    if (ctx_gate_ && rc.has_ctx()) out = ctx_gate_->apply(out, rc.ctx);
    return out;
}

// ---------------------------------------------------------------------------
// Factory
// ---------------------------------------------------------------------------

BlockPtr make_block(BlockKind kind, const BlockOpts& o) {
    switch (kind) {
        case BlockKind::Conv: return std::make_shared<ConvBlock>(o);
        case BlockKind::ResConv: return std::make_shared<ResidualBlock>(BlockKind::Conv, o);
        case BlockKind::Vit: return make_vit_block(o);
        case BlockKind::Swin: return std::make_shared<SwinBlock>(o);
        case BlockKind::Mamba: return std::make_shared<MambaBlock>(o);
        case BlockKind::ResSwin: return std::make_shared<ResidualBlock>(BlockKind::Swin, o);
        case BlockKind::ResMamba: return std::make_shared<ResidualBlock>(BlockKind::Mamba, o);
    }
    throw ConfigError("unknown block kind");
}

}  // namespace modim::blocks
