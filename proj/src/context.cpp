#include "modim/context.hpp"

#include <cmath>

namespace modim::context {

torch::Tensor sinusoidal_embed_batch(const torch::Tensor& steps, int64_t dim) {
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("sinusoidal embedding dim must be even and >= 2, got " + std::to_string(dim));
    auto s = steps.to(torch::kDouble).reshape({-1, 1});  // (B, 1)
    auto i = torch::arange(dim / 2, torch::kDouble);
    auto freq = torch::exp(i * (-2.0 * std::log(10000.0) / static_cast<double>(dim)));  // (dim/2,)
    auto arg = s * freq.unsqueeze(0);                                                   // (B, dim/2)
    auto emb = torch::stack({torch::sin(arg), torch::cos(arg)}, 2).reshape({s.size(0), dim});
    return emb.to(torch::kFloat);
}

torch::Tensor sinusoidal_embed(int64_t step, int64_t dim) {
    if (step < 0) throw ConfigError("sinusoidal embedding step must be non-negative");
    return sinusoidal_embed_batch(torch::tensor({step}, torch::kLong), dim).squeeze(0);
}

torch::Tensor one_hot_embed(int64_t label, int64_t num_classes) {
    if (label < 0 || label >= num_classes)
        throw ConfigError("label " + std::to_string(label) + " out of range [0, " +
                          std::to_string(num_classes) + ")");
    auto v = torch::zeros({num_classes});
    v[label] = 1.0;
    return v;
}

torch::Tensor one_hot_embed_batch(const torch::Tensor& labels, int64_t num_classes) {
    auto l = labels.to(torch::kLong);
    TORCH_CHECK((l >= 0).all().item<bool>() && (l < num_classes).all().item<bool>(),
                "label out of range");
    return torch::one_hot(l, num_classes).to(torch::kFloat);
}

LabelEmbed::LabelEmbed(int64_t num_classes, int64_t ctx_dim) : num_classes_(num_classes) {
    proj_ = register_module("proj", torch::nn::Linear(num_classes, ctx_dim));
}

torch::Tensor LabelEmbed::forward(const torch::Tensor& labels) {
    return proj_(one_hot_embed_batch(labels, num_classes_));
}

ConditionEncoder::ConditionEncoder(const Opts& o) : o_(o) {
    auto add_conv = [&](int64_t in, int64_t out, int64_t k, int64_t stride, const std::string& name) {
        const int64_t pad = (k - 1) / 2;
        if (o_.rank == 2) {
            auto c = torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad));
            register_module(name, c.ptr());
            convs_.emplace_back(c);
        } else {
            auto c = torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, k).stride(stride).padding(pad));
            register_module(name, c.ptr());
            convs_.emplace_back(c);
        }
    };

    auto add_patch_conv = [&](int64_t in, int64_t out, int64_t patch, const std::string& name) {
        if (o_.rank == 2) {
            auto c = torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, patch).stride(patch));
            register_module(name, c.ptr());
            convs_.emplace_back(c);
        } else {
            auto c = torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, patch).stride(patch));
            register_module(name, c.ptr());
            convs_.emplace_back(c);
        }
    };

    if (o_.side == Side::EncoderSide) {
        if (o_.identity) {
            if (o_.in_channels != o_.out_channels)
                throw ConfigError("identity condition encoder requires matching channel counts");
            return;
        }
        add_conv(o_.in_channels, o_.out_channels, 3, 1, "conv0");
        add_conv(o_.out_channels, o_.out_channels, 3, 1, "conv1");
    } else {
        // patch conv, then one strided conv per down stage
        TORCH_CHECK(!o_.down_channels.empty(), "decoder-side condition encoder needs a channel schedule");
        add_patch_conv(o_.in_channels, o_.down_channels[0], std::max<int64_t>(o_.patch, 1), "patch");
        for (size_t i = 0; i + 1 < o_.down_channels.size(); ++i)
            add_conv(o_.down_channels[i], o_.down_channels[i + 1], 2, 2, "down" + std::to_string(i));
        if (o_.dense_latent > 0) {
            int64_t flat = o_.down_channels.back() * prod(o_.latent_dims);
            dense_ = register_module("dense", torch::nn::Linear(flat, o_.dense_latent));
        }
    }
}

torch::Tensor ConditionEncoder::forward(const torch::Tensor& c) {
    if (o_.side == Side::EncoderSide && o_.identity) return c;
    auto h = c;
    for (size_t i = 0; i < convs_.size(); ++i) {
        h = convs_[i].forward(h);
        if (i + 1 < convs_.size() || dense_) h = torch::relu(h);
    }
    if (dense_) h = dense_(h.flatten(1));
    return h;
}

}  // namespace modim::context
