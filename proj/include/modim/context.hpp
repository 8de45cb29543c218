#pragma once

#include <torch/torch.h>

#include "modim/common.hpp"

namespace modim::context {

// Interleaved sin/cos embedding at geometric frequencies with base 10000:
// out[2i] = sin(step * w_i), out[2i+1] = cos(step * w_i), w_i = 10000^(-2i/dim).
torch::Tensor sinusoidal_embed(int64_t step, int64_t dim);

// Batched variant: steps (B,) -> (B, dim).
torch::Tensor sinusoidal_embed_batch(const torch::Tensor& steps, int64_t dim);

// One-hot probability vector; 0 <= label < num_classes.
torch::Tensor one_hot_embed(int64_t label, int64_t num_classes);
torch::Tensor one_hot_embed_batch(const torch::Tensor& labels, int64_t num_classes);

// One-hot followed by a learned linear map to the context width.
class LabelEmbed : public torch::nn::Module {
public:
    LabelEmbed(int64_t num_classes, int64_t ctx_dim);
    torch::Tensor forward(const torch::Tensor& labels);  // (B,) long -> (B, ctx_dim)

private:
    int64_t num_classes_;
    torch::nn::Linear proj_{nullptr};
};

// Encodes a condition image into an additive term. The encoder-side variant
// preserves spatial dims and maps to the input's channel count; the
// decoder-side variant follows the main encoder's patching/down-sampling so
// its output matches the latent value it is added to.
class ConditionEncoder : public torch::nn::Module {
public:
    enum class Side { EncoderSide, DecoderSide };

    struct Opts {
        Side side = Side::EncoderSide;
        int64_t rank = 2;
        int64_t in_channels = 1;
        int64_t out_channels = 1;    // target channels of the add target
        bool identity = false;       // encoder side only; requires matching channels
        // decoder side geometry (mirrors the main encoder)
        int64_t patch = 1;
        std::vector<int64_t> down_channels;  // channel schedule walked by strided convs
        int64_t dense_latent = 0;            // flatten + linear when the latent is dense
        std::vector<int64_t> latent_dims;    // spatial dims of the latent (dense flatten size)
    };

    explicit ConditionEncoder(const Opts& o);
    torch::Tensor forward(const torch::Tensor& c);

private:
    Opts o_;
    std::vector<torch::nn::AnyModule> convs_;
    torch::nn::Linear dense_{nullptr};
};

}  // namespace modim::context
