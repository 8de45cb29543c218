#pragma once

#include <torch/torch.h>

#include "modim/common.hpp"

namespace modim::losses {

// Cross entropy over a per-class score map. `target` is an index map
// (B, d1..dk) of class ids, or a one-hot / probability map (B, C, d1..dk).
torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& target);

// 1 - soft Dice averaged over foreground classes, with smoothing eps.
// `probs` are per-class probabilities in [0, 1].
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target,
                        double eps = 1e-5);

torch::Tensor mse_loss(const torch::Tensor& pred, const torch::Tensor& target);
torch::Tensor l1_loss(const torch::Tensor& pred, const torch::Tensor& target);

// KL(N(mean, exp(logvar)) || N(0, 1)) summed over latent dims, mean over batch.
torch::Tensor kl_loss(const torch::Tensor& mean, const torch::Tensor& logvar);

// Turns an index map (B, d..) into a one-hot map (B, C, d..).
torch::Tensor one_hot_map(const torch::Tensor& index_map, int64_t num_classes);

}  // namespace modim::losses

namespace modim::metrics {

// Hard-label Dice 2|X n Y| / (|X| + |Y|) per class, averaged over foreground
// classes. A class absent from both maps is excluded from the mean; absent
// from exactly one contributes 0. All-absent foreground reports 1.
double dice_score(const torch::Tensor& pred_labels, const torch::Tensor& target,
                  int64_t num_classes);

// Mean over classes of |X n Y| / |X u Y| with the same empty-class convention.
double miou(const torch::Tensor& pred_labels, const torch::Tensor& target, int64_t num_classes);

// 10 log10(max^2 / MSE); +inf for identical inputs.
double psnr(const torch::Tensor& pred, const torch::Tensor& target, double max_value = 1.0);

// Windowed SSIM (Gaussian window, default 11 wide, sigma 1.5,
// C1 = (0.01 L)^2, C2 = (0.03 L)^2), mean over valid window positions.
// Works on (B, C, d1..dk) or bare (d1..dk) maps, ranks 2 and 3; the window is
// clamped to the smallest spatial extent (kept odd).
double ssim(const torch::Tensor& pred, const torch::Tensor& target, double max_value = 1.0,
            int64_t window = 11, double sigma = 1.5);

}  // namespace modim::metrics
