#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "modim/blocks.hpp"
#include "modim/common.hpp"

namespace modim::codec {

enum class Backbone { Conv, ResConv, Vit, Swin, Mamba, ConvMsa };

Backbone backbone_from_string(const std::string& s);
std::string to_string(Backbone b);
bool is_sequence_backbone(Backbone b);  // uses patch merging / expansion

struct EncoderSpec {
    Backbone backbone = Backbone::Conv;
    int64_t rank = 2;
    int64_t in_channels = 1;
    std::vector<int64_t> channel_schedule;  // length num_down + 1; empty = doubling from base
    int64_t base_channels = 16;
    int64_t num_down = -1;  // -1 = default (2 for 2D, 3 for 3D)
    int64_t blocks_per_stage = 1;
    int64_t num_middle = 2;
    int64_t patch_size = 0;  // 0 = default (1 conv-family; 4 sequence 2D; 2 sequence 3D)
    bool u_shaped = false;
    int64_t dense_latent = 0;  // 0 = none
    int64_t final_layers = 1;
    std::vector<int64_t> input_size;  // spatial dims the model is built for

    // block options
    int64_t window = 4;
    int64_t heads = 0;
    double drop_path = -1.0;  // -1 = default per block kind
    int64_t state_dim = 8;
    int64_t expand = 2;
    int64_t mlp_ratio = 4;
    int64_t ctx_dim = 0;  // context width the blocks accept; 0 = context-free

    void validate() const;
    int64_t patch() const;
    int64_t downs() const;
    std::vector<int64_t> resolved_schedule() const;
    // token-grid dims after patch encoding and `stage` down-samplings (ceil at each halving)
    std::vector<int64_t> stage_dims(int64_t stage) const;
    std::vector<int64_t> latent_dims() const { return stage_dims(downs()); }
    double default_drop_path() const;
};

// Encoder output: the latent plus the per-stage skip maps (coarse-last) and
// the spatial bookkeeping the decoder needs to restore exact input dims.
struct LatentBundle {
    torch::Tensor z;                          // (B, C, d..) or (B, latent) when dense
    std::vector<torch::Tensor> skips;         // fine-first, i.e. coarse-last
    std::vector<std::vector<int64_t>> trace;  // token dims per stage, fine-first (size downs+1)
    std::vector<int64_t> input_dims;
    std::vector<int64_t> latent_dims;
    int64_t latent_channels = 0;
};

// Doubles channels and halves every spatial dim (odd dims are zero-padded to
// even first). Conv-family backbones use a strided conv; sequence backbones
// concatenate the 2^rank neighborhood and apply a linear map.
class Downsample : public torch::nn::Module {
public:
    Downsample(Backbone bb, int64_t rank, int64_t in_ch, int64_t out_ch);
    torch::Tensor forward(const torch::Tensor& x);

private:
    Backbone bb_;
    int64_t rank_, in_ch_, out_ch_;
    torch::nn::AnyModule conv_;
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear reduce_{nullptr};
};

class Upsample : public torch::nn::Module {
public:
    Upsample(Backbone bb, int64_t rank, int64_t in_ch, int64_t out_ch);
    torch::Tensor forward(const torch::Tensor& x);

private:
    Backbone bb_;
    int64_t rank_, in_ch_, out_ch_;
    torch::nn::AnyModule conv_;
    torch::nn::Linear expand_{nullptr};
};

// Concatenates each 2^rank neighborhood into channels: (B, C, d..) ->
// (B, 2^rank * C, d/2..). The intermediate of patch merging.
torch::Tensor nbhd_concat(const torch::Tensor& x);
// Inverse rearrangement: (B, 2^rank * C, d..) -> (B, C, 2d..).
torch::Tensor nbhd_expand(const torch::Tensor& x);

// Strided conv patch embedding; pads to a patch multiple first.
class PatchEncode : public torch::nn::Module {
public:
    PatchEncode(int64_t rank, int64_t in_ch, int64_t out_ch, int64_t patch);
    torch::Tensor forward(const torch::Tensor& x);

private:
    int64_t rank_, patch_;
    torch::nn::AnyModule conv_;
};

// Transposed-conv patch decoding back to pixel space.
class PatchDecode : public torch::nn::Module {
public:
    PatchDecode(int64_t rank, int64_t in_ch, int64_t out_ch, int64_t patch);
    torch::Tensor forward(const torch::Tensor& x);

private:
    int64_t rank_, patch_;
    torch::nn::AnyModule conv_;
};

class Encoder : public torch::nn::Module {
public:
    explicit Encoder(EncoderSpec spec);
    LatentBundle forward(const torch::Tensor& x, const RunCtx& rc);
    const EncoderSpec& spec() const { return spec_; }

private:
    EncoderSpec spec_;
    std::shared_ptr<PatchEncode> patch_;
    std::vector<std::vector<blocks::BlockPtr>> stage_blocks_;  // one list per down stage
    std::vector<std::shared_ptr<Downsample>> downs_;
    std::vector<blocks::BlockPtr> middle_;
    torch::nn::Linear dense_{nullptr};
};

struct DecoderOut {
    torch::Tensor y;
    std::vector<torch::Tensor> stages;  // coarse -> fine feature maps when collected
};

class Decoder : public torch::nn::Module {
public:
    // with_output_head = false drops the final layers and patch decode; the
    // hierarchical combination layer supplies its own decode in that case.
    Decoder(EncoderSpec spec, int64_t out_channels, bool with_output_head = true);
    DecoderOut forward(const LatentBundle& b, const RunCtx& rc, bool collect_stages = false);
    const EncoderSpec& spec() const { return spec_; }
    int64_t out_channels() const { return out_channels_; }

private:
    EncoderSpec spec_;
    int64_t out_channels_;
    torch::nn::Linear undense_{nullptr};
    std::vector<std::shared_ptr<Upsample>> ups_;
    std::vector<blocks::BlockPtr> fuse_;  // skip fusion per stage (u-shaped only)
    std::vector<std::vector<blocks::BlockPtr>> stage_blocks_;
    std::vector<blocks::BlockPtr> final_;
    std::shared_ptr<PatchDecode> patch_;
};

// Building-block factory wired to an EncoderSpec: resolves window/shift/heads
// for the token grid at `stage_dims`, alternating shift for odd block indices.
blocks::BlockPtr make_stage_block(const EncoderSpec& spec, int64_t channels,
                                  const std::vector<int64_t>& stage_dims, int64_t block_index,
                                  bool with_ctx);

// Channel-mapping fusion applied after skip concatenation (conv family maps
// with a ConvBlock; sequence family with a linear reduction).
blocks::BlockPtr make_fusion(const EncoderSpec& spec, int64_t in_ch, int64_t out_ch);

}  // namespace modim::codec
