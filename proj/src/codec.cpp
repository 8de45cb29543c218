#include "modim/codec.hpp"

#include <algorithm>
#include <cmath>

namespace F = torch::nn::functional;
using modim::blocks::Block;
using modim::blocks::BlockKind;
using modim::blocks::BlockOpts;
using modim::blocks::BlockPtr;

namespace modim::codec {

Backbone backbone_from_string(const std::string& s) {
    if (s == "conv") return Backbone::Conv;
    if (s == "res_conv") return Backbone::ResConv;
    if (s == "vit") return Backbone::Vit;
    if (s == "swin") return Backbone::Swin;
    if (s == "mamba") return Backbone::Mamba;
    if (s == "conv_msa" || s == "conv+msa") return Backbone::ConvMsa;
    throw ConfigError("unknown backbone: " + s);
}

std::string to_string(Backbone b) {
    switch (b) {
        case Backbone::Conv: return "conv";
        case Backbone::ResConv: return "res_conv";
        case Backbone::Vit: return "vit";
        case Backbone::Swin: return "swin";
        case Backbone::Mamba: return "mamba";
        case Backbone::ConvMsa: return "conv_msa";
    }
    return "?";
}

bool is_sequence_backbone(Backbone b) {
    return b == Backbone::Vit || b == Backbone::Swin || b == Backbone::Mamba;
}

// ---------------------------------------------------------------------------
// EncoderSpec
// ---------------------------------------------------------------------------

int64_t EncoderSpec::patch() const {
    if (patch_size > 0) return patch_size;
    if (is_sequence_backbone(backbone)) return rank == 2 ? 4 : 2;
    return 1;
}

int64_t EncoderSpec::downs() const { return num_down >= 0 ? num_down : (rank == 2 ? 2 : 3); }

double EncoderSpec::default_drop_path() const {
    return is_sequence_backbone(backbone) || backbone == Backbone::ConvMsa ? 0.1 : 0.0;
}

std::vector<int64_t> EncoderSpec::resolved_schedule() const {
    if (!channel_schedule.empty()) return channel_schedule;
    std::vector<int64_t> s;
    for (int64_t i = 0; i <= downs(); ++i) s.push_back(base_channels << i);
    return s;
}

std::vector<int64_t> EncoderSpec::stage_dims(int64_t stage) const {
    std::vector<int64_t> d;
    for (int64_t v : input_size) d.push_back((v + patch() - 1) / patch());
    for (int64_t s = 0; s < stage; ++s)
        for (auto& v : d) v = (v + 1) / 2;
    return d;
}

void EncoderSpec::validate() const {
    if (rank != 2 && rank != 3) throw ConfigError("encoder rank must be 2 or 3");
    if (in_channels < 1) throw ConfigError("encoder in_channels must be >= 1");
    if (static_cast<int64_t>(input_size.size()) != rank)
        throw ConfigError("encoder input_size must list one extent per spatial dim");
    for (int64_t v : input_size)
        if (v < 1) throw ConfigError("encoder input_size extents must be >= 1");
    if (!channel_schedule.empty() &&
        static_cast<int64_t>(channel_schedule.size()) != downs() + 1)
        throw ConfigError("channel_schedule length must be num_down + 1");
    for (int64_t c : resolved_schedule())
        if (c < 1) throw ConfigError("channel schedule entries must be >= 1");
    if (u_shaped && dense_latent > 0)
        throw ConfigError("u_shaped encoders keep a spatial latent; dense_latent must be none");
    if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
    if (num_middle < 0 || final_layers < 0) throw ConfigError("layer counts must be >= 0");
    if (window < 1) throw ConfigError("window must be >= 1");
    const int64_t need = int64_t(1) << downs();
    for (int64_t v : input_size)
        if ((v + patch() - 1) / patch() < need)
            throw ConfigError("input too small to survive " + std::to_string(downs()) +
                              " down-sampling halvings");
    if (drop_path >= 1.0) throw ConfigError("drop_path must be < 1");
}

// ---------------------------------------------------------------------------
// Neighborhood rearrangements (patch merging / expansion cores)
// ---------------------------------------------------------------------------

torch::Tensor nbhd_concat(const torch::Tensor& x) {
    const int64_t rank = spatial_rank_of(x);
    const auto dims = spatial_dims_of(x);
    const int64_t b = x.size(0), c = x.size(1);
    for (int64_t d : dims) TORCH_CHECK(d % 2 == 0, "nbhd_concat requires even spatial dims");
    std::vector<int64_t> vs{b, c};
    for (int64_t d : dims) {
        vs.push_back(d / 2);
        vs.push_back(2);
    }
    std::vector<int64_t> perm{0};
    for (int64_t i = 0; i < rank; ++i) perm.push_back(3 + 2 * i);  // the 2-factors
    perm.push_back(1);
    for (int64_t i = 0; i < rank; ++i) perm.push_back(2 + 2 * i);  // halved dims
    std::vector<int64_t> out{b, (int64_t(1) << rank) * c};
    for (int64_t d : dims) out.push_back(d / 2);
    return x.view(vs).permute(perm).contiguous().view(out);
}

torch::Tensor nbhd_expand(const torch::Tensor& x) {
    const int64_t rank = spatial_rank_of(x);
    const auto dims = spatial_dims_of(x);
    const int64_t b = x.size(0);
    const int64_t factor = int64_t(1) << rank;
    TORCH_CHECK(x.size(1) % factor == 0, "nbhd_expand channel count must be divisible by 2^rank");
    const int64_t c = x.size(1) / factor;
    std::vector<int64_t> vs{b};
    for (int64_t i = 0; i < rank; ++i) vs.push_back(2);
    vs.push_back(c);
    for (int64_t d : dims) vs.push_back(d);
    std::vector<int64_t> perm{0, rank + 1};
    for (int64_t i = 0; i < rank; ++i) {
        perm.push_back(rank + 2 + i);  // dim i
        perm.push_back(1 + i);         // its 2-factor
    }
    std::vector<int64_t> out{b, c};
    for (int64_t d : dims) out.push_back(d * 2);
    return x.view(vs).permute(perm).contiguous().view(out);
}

namespace {

torch::Tensor pad_to_multiple(const torch::Tensor& x, int64_t multiple) {
    const auto dims = spatial_dims_of(x);
    std::vector<int64_t> arg;
    bool any = false;
    for (int64_t i = static_cast<int64_t>(dims.size()) - 1; i >= 0; --i) {
        int64_t padded = (dims[i] + multiple - 1) / multiple * multiple;
        int64_t total = padded - dims[i];
        arg.push_back(total / 2);
        arg.push_back(total - total / 2);
        any |= total != 0;
    }
    return any ? F::pad(x, F::PadFuncOptions(arg)) : x;
}

torch::Tensor crop_to(const torch::Tensor& x, const std::vector<int64_t>& target) {
    auto out = x;
    for (size_t i = 0; i < target.size(); ++i) {
        int64_t cur = out.size(static_cast<int64_t>(i) + 2);
        if (cur != target[i]) {
            TORCH_CHECK(cur > target[i], "cannot crop up");
            out = out.narrow(static_cast<int64_t>(i) + 2, (cur - target[i]) / 2, target[i]);
        }
    }
    return out.contiguous();
}

torch::Tensor to_tokens(const torch::Tensor& grid) { return grid.flatten(2).transpose(1, 2); }

torch::Tensor to_grid(const torch::Tensor& tokens, int64_t channels,
                      const std::vector<int64_t>& dims) {
    std::vector<int64_t> shape{tokens.size(0), channels};
    shape.insert(shape.end(), dims.begin(), dims.end());
    return tokens.transpose(1, 2).reshape(shape);
}

// Sequential composition of building blocks behaving as one block
// (conv+msa stages are a ConvBlock followed by a global-MSA block).
class Composite : public Block {
public:
    Composite(std::vector<BlockPtr> parts, int64_t out_ch) : out_ch_(out_ch), parts_(std::move(parts)) {
        int64_t i = 0;
        for (auto& p : parts_) register_module("part" + std::to_string(i++), p);
    }
    torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc) override {
        auto h = x;
        for (auto& p : parts_) h = p->forward(h, rc);
        return h;
    }
    int64_t out_channels() const override { return out_ch_; }

private:
    int64_t out_ch_;
    std::vector<BlockPtr> parts_;
};

// Token-space linear channel reduction used for skip fusion in sequence backbones.
class ChannelMap : public Block {
public:
    ChannelMap(int64_t in_ch, int64_t out_ch) : out_ch_(out_ch) {
        lin_ = register_module("lin", torch::nn::Linear(in_ch, out_ch));
    }
    torch::Tensor forward(const torch::Tensor& x, const RunCtx&) override {
        return to_grid(lin_(to_tokens(x)), out_ch_, spatial_dims_of(x));
    }
    int64_t out_channels() const override { return out_ch_; }

private:
    int64_t out_ch_;
    torch::nn::Linear lin_{nullptr};
};

}  // namespace

// ---------------------------------------------------------------------------
// Down / Up sampling
// ---------------------------------------------------------------------------

Downsample::Downsample(Backbone bb, int64_t rank, int64_t in_ch, int64_t out_ch)
    : bb_(bb), rank_(rank), in_ch_(in_ch), out_ch_(out_ch) {
    if (is_sequence_backbone(bb_)) {
        const int64_t merged = (int64_t(1) << rank_) * in_ch_;
        norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({merged})));
        reduce_ = register_module("reduce", torch::nn::Linear(merged, out_ch_));
    } else if (rank_ == 2) {
        auto c = torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch_, out_ch_, 2).stride(2));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    } else {
        auto c = torch::nn::Conv3d(torch::nn::Conv3dOptions(in_ch_, out_ch_, 2).stride(2));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    }
}

torch::Tensor Downsample::forward(const torch::Tensor& x) {
    check_patch_grid(x, rank_, in_ch_);
    for (int64_t d : spatial_dims_of(x))
        TORCH_CHECK(d >= 2, "downsample needs every spatial dim >= 2");
    auto xp = pad_to_multiple(x, 2);
    if (is_sequence_backbone(bb_)) {
        auto merged = nbhd_concat(xp);  // (B, 2^r C, d/2..)
        auto t = reduce_(norm_(to_tokens(merged)));
        return to_grid(t, out_ch_, spatial_dims_of(merged));
    }
    return conv_.forward(xp);
}

Upsample::Upsample(Backbone bb, int64_t rank, int64_t in_ch, int64_t out_ch)
    : bb_(bb), rank_(rank), in_ch_(in_ch), out_ch_(out_ch) {
    if (is_sequence_backbone(bb_)) {
        expand_ = register_module("expand",
                                  torch::nn::Linear(in_ch_, (int64_t(1) << rank_) * out_ch_));
    } else if (rank_ == 2) {
        auto c = torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in_ch_, out_ch_, 2).stride(2));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    } else {
        auto c = torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(in_ch_, out_ch_, 2).stride(2));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    }
}

torch::Tensor Upsample::forward(const torch::Tensor& x) {
    check_patch_grid(x, rank_, in_ch_);
    if (is_sequence_backbone(bb_)) {
        auto t = expand_(to_tokens(x));
        auto grid = to_grid(t, (int64_t(1) << rank_) * out_ch_, spatial_dims_of(x));
        return nbhd_expand(grid);
    }
    return conv_.forward(x);
}

// ---------------------------------------------------------------------------
// Patch encode / decode
// ---------------------------------------------------------------------------

PatchEncode::PatchEncode(int64_t rank, int64_t in_ch, int64_t out_ch, int64_t patch)
    : rank_(rank), patch_(patch) {
    if (rank_ == 2) {
        auto c = torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, patch_).stride(patch_));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    } else {
        auto c = torch::nn::Conv3d(torch::nn::Conv3dOptions(in_ch, out_ch, patch_).stride(patch_));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    }
}

torch::Tensor PatchEncode::forward(const torch::Tensor& x) {
    check_patch_grid(x, rank_);
    return conv_.forward(patch_ > 1 ? pad_to_multiple(x, patch_) : x);
}

PatchDecode::PatchDecode(int64_t rank, int64_t in_ch, int64_t out_ch, int64_t patch)
    : rank_(rank), patch_(patch) {
    if (rank_ == 2) {
        auto c = torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(in_ch, out_ch, patch_).stride(patch_));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    } else {
        auto c = torch::nn::ConvTranspose3d(
            torch::nn::ConvTranspose3dOptions(in_ch, out_ch, patch_).stride(patch_));
        register_module("conv", c.ptr());
        conv_ = torch::nn::AnyModule(c);
    }
}

torch::Tensor PatchDecode::forward(const torch::Tensor& x) {
    check_patch_grid(x, rank_);
    return conv_.forward(x);
}

// ---------------------------------------------------------------------------
// Stage block factories
// ---------------------------------------------------------------------------

blocks::BlockPtr make_stage_block(const EncoderSpec& spec, int64_t channels,
                                  const std::vector<int64_t>& stage_dims, int64_t block_index,
                                  bool with_ctx) {
    BlockOpts bo;
    bo.rank = spec.rank;
    bo.channels = channels;
    bo.ctx_dim = with_ctx ? spec.ctx_dim : 0;
    bo.heads = spec.heads;
    bo.state_dim = spec.state_dim;
    bo.expand = spec.expand;
    bo.mlp_ratio = spec.mlp_ratio;
    bo.drop_path = spec.drop_path >= 0.0 ? spec.drop_path : spec.default_drop_path();

    switch (spec.backbone) {
        case Backbone::Conv: {
            bo.drop_path = 0.0;
            return blocks::make_block(BlockKind::Conv, bo);
        }
        case Backbone::ResConv: {
            bo.drop_path = 0.0;
            return blocks::make_block(BlockKind::ResConv, bo);
        }
        case Backbone::Mamba:
            return blocks::make_block(BlockKind::Mamba, bo);
        case Backbone::Vit: {
            bo.window = stage_dims;
            return blocks::make_vit_block(bo);
        }
        case Backbone::Swin: {
            bo.window.clear();
            bo.shift.clear();
            for (int64_t d : stage_dims) {
                int64_t w = std::max<int64_t>(1, std::min(spec.window, d));
                bo.window.push_back(w);
                bo.shift.push_back(block_index % 2 == 1 ? w / 2 : 0);
            }
            return blocks::make_block(BlockKind::Swin, bo);
        }
        case Backbone::ConvMsa: {
            BlockOpts co = bo;
            co.drop_path = 0.0;
            auto conv = blocks::make_block(BlockKind::Conv, co);
            BlockOpts vo = bo;
            vo.window = stage_dims;
            auto vit = blocks::make_vit_block(vo);
            return std::make_shared<Composite>(std::vector<BlockPtr>{conv, vit}, channels);
        }
    }
    throw ConfigError("unknown backbone");
}

blocks::BlockPtr make_fusion(const EncoderSpec& spec, int64_t in_ch, int64_t out_ch) {
    if (is_sequence_backbone(spec.backbone)) return std::make_shared<ChannelMap>(in_ch, out_ch);
    BlockOpts bo;
    bo.rank = spec.rank;
    bo.channels = in_ch;
    bo.out_channels = out_ch;
    bo.ctx_dim = spec.ctx_dim;
    bo.drop_path = 0.0;
    return blocks::make_block(BlockKind::Conv, bo);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(EncoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto sched = spec_.resolved_schedule();
    const int64_t nd = spec_.downs();

    patch_ = register_module(
        "patch", std::make_shared<PatchEncode>(spec_.rank, spec_.in_channels, sched[0], spec_.patch()));

    for (int64_t s = 0; s < nd; ++s) {
        std::vector<BlockPtr> bl;
        for (int64_t i = 0; i < spec_.blocks_per_stage; ++i) {
            auto b = make_stage_block(spec_, sched[s], spec_.stage_dims(s), i, spec_.ctx_dim > 0);
            register_module("stage" + std::to_string(s) + "_block" + std::to_string(i), b);
            bl.push_back(b);
        }
        stage_blocks_.push_back(std::move(bl));
        auto d = std::make_shared<Downsample>(spec_.backbone, spec_.rank, sched[s], sched[s + 1]);
        register_module("down" + std::to_string(s), d);
        downs_.push_back(d);
    }

    for (int64_t i = 0; i < spec_.num_middle; ++i) {
        auto b = make_stage_block(spec_, sched[nd], spec_.latent_dims(), i, spec_.ctx_dim > 0);
        register_module("middle" + std::to_string(i), b);
        middle_.push_back(b);
    }

    if (spec_.dense_latent > 0) {
        const int64_t flat = sched[nd] * prod(spec_.latent_dims());
        dense_ = register_module("dense", torch::nn::Linear(flat, spec_.dense_latent));
    }
}

LatentBundle Encoder::forward(const torch::Tensor& x, const RunCtx& rc) {
    check_patch_grid(x, spec_.rank, spec_.in_channels);
    LatentBundle b;
    b.input_dims = spatial_dims_of(x);

    auto h = patch_->forward(x);
    b.trace.push_back(spatial_dims_of(h));
    for (size_t s = 0; s < downs_.size(); ++s) {
        for (auto& blk : stage_blocks_[s]) h = blk->forward(h, rc);
        if (spec_.u_shaped) b.skips.push_back(h);
        h = downs_[s]->forward(h);
        b.trace.push_back(spatial_dims_of(h));
    }
    for (auto& blk : middle_) h = blk->forward(h, rc);

    b.latent_dims = spatial_dims_of(h);
    b.latent_channels = h.size(1);
    b.z = dense_ ? dense_(h.flatten(1)) : h;
    return b;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Decoder::Decoder(EncoderSpec spec, int64_t out_channels, bool with_output_head)
    : spec_(std::move(spec)), out_channels_(out_channels) {
    spec_.validate();
    const auto sched = spec_.resolved_schedule();
    const int64_t nd = spec_.downs();

    if (spec_.dense_latent > 0) {
        const int64_t flat = sched[nd] * prod(spec_.latent_dims());
        undense_ = register_module("undense", torch::nn::Linear(spec_.dense_latent, flat));
    }

    for (int64_t s = 0; s < nd; ++s) {
        const int64_t cin = sched[nd - s];
        const int64_t cout = sched[nd - 1 - s];
        auto up = std::make_shared<Upsample>(spec_.backbone, spec_.rank, cin, cout);
        register_module("up" + std::to_string(s), up);
        ups_.push_back(up);

        if (spec_.u_shaped) {
            auto f = make_fusion(spec_, 2 * cout, cout);
            register_module("fuse" + std::to_string(s), f);
            fuse_.push_back(f);
        }

        std::vector<BlockPtr> bl;
        for (int64_t i = 0; i < spec_.blocks_per_stage; ++i) {
            auto b = make_stage_block(spec_, cout, spec_.stage_dims(nd - 1 - s), i, spec_.ctx_dim > 0);
            register_module("dstage" + std::to_string(s) + "_block" + std::to_string(i), b);
            bl.push_back(b);
        }
        stage_blocks_.push_back(std::move(bl));
    }

    if (with_output_head) {
        for (int64_t i = 0; i < spec_.final_layers; ++i) {
            auto b = make_stage_block(spec_, sched[0], spec_.stage_dims(0), i, spec_.ctx_dim > 0);
            register_module("final" + std::to_string(i), b);
            final_.push_back(b);
        }
        patch_ = register_module(
            "patch",
            std::make_shared<PatchDecode>(spec_.rank, sched[0], out_channels_, spec_.patch()));
    }
}

DecoderOut Decoder::forward(const LatentBundle& b, const RunCtx& rc, bool collect_stages) {
    const auto sched = spec_.resolved_schedule();
    const int64_t nd = spec_.downs();
    if (spec_.u_shaped && static_cast<int64_t>(b.skips.size()) != nd)
        throw ShapeError("skip/stage count mismatch: got " + std::to_string(b.skips.size()) +
                         " skips for " + std::to_string(nd) + " up-sampling stages");
    TORCH_CHECK(static_cast<int64_t>(b.trace.size()) == nd + 1, "latent bundle trace mismatch");

    DecoderOut out;
    torch::Tensor h;
    if (undense_) {
        TORCH_CHECK(b.z.dim() == 2, "dense latent must be a flat vector");
        std::vector<int64_t> shape{b.z.size(0), sched[nd]};
        const auto ld = b.latent_dims.empty() ? spec_.latent_dims() : b.latent_dims;
        shape.insert(shape.end(), ld.begin(), ld.end());
        h = undense_(b.z).view(shape);
    } else {
        h = b.z;
    }
    if (collect_stages) out.stages.push_back(h);

    for (int64_t s = 0; s < nd; ++s) {
        h = ups_[s]->forward(h);
        h = crop_to(h, b.trace[nd - 1 - s]);
        if (spec_.u_shaped) {
            const auto& skip = b.skips[nd - 1 - s];  // skips are coarse-last
            if (!std::equal(skip.sizes().begin() + 2, skip.sizes().end(), h.sizes().begin() + 2))
                throw ShapeError("skip spatial dims do not match decoder stage input");
            h = fuse_[s]->forward(torch::cat({h, skip}, 1), rc);
        }
        for (auto& blk : stage_blocks_[s]) h = blk->forward(h, rc);
        if (collect_stages) out.stages.push_back(h);
    }

    if (patch_) {
        auto f = h;
        for (auto& blk : final_) f = blk->forward(f, rc);
        out.y = crop_to(patch_->forward(f), b.input_dims);
    }
    return out;
}

}  // namespace modim::codec
