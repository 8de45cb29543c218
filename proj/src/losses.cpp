#include "modim/losses.hpp"

namespace F = torch::nn::functional;

namespace modim::losses {

torch::Tensor one_hot_map(const torch::Tensor& index_map, int64_t num_classes) {
    auto oh = torch::one_hot(index_map.to(torch::kLong), num_classes);  // (B, d.., C)
    std::vector<int64_t> perm{0, oh.dim() - 1};
    for (int64_t i = 1; i < oh.dim() - 1; ++i) perm.push_back(i);
    return oh.permute(perm).to(torch::kFloat);
}

torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& target) {
    if (target.dim() == logits.dim()) {
        if (target.size(1) != logits.size(1))
            throw ShapeError("class-count mismatch between prediction and target");
        auto logp = torch::log_softmax(logits, 1);
        return -(target.to(logits.dtype()) * logp).sum(1).mean();
    }
    if (target.dim() != logits.dim() - 1)
        throw ShapeError("target must be an index map or a per-class map");
    return F::cross_entropy(logits, target.to(torch::kLong));
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps) {
    const int64_t classes = probs.size(1);
    auto tgt = target.dim() == probs.dim() ? target.to(probs.dtype()) : one_hot_map(target, classes).to(probs.dtype());
    if (tgt.size(1) != classes) throw ShapeError("class-count mismatch between prediction and target");

    auto p = probs.flatten(2);
    auto t = tgt.flatten(2);
    auto inter = (p * t).sum(2);
    auto denom = p.sum(2) + t.sum(2);
    auto dice = (2.0 * inter + eps) / (denom + eps);  // (B, C)
    const int64_t fg = classes > 1 ? classes - 1 : classes;
    auto fg_dice = classes > 1 ? dice.narrow(1, 1, fg) : dice;
    return 1.0 - fg_dice.mean();
}

torch::Tensor mse_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    if (pred.sizes() != target.sizes()) throw ShapeError("shape mismatch in mse_loss");
    return F::mse_loss(pred, target);
}

torch::Tensor l1_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    if (pred.sizes() != target.sizes()) throw ShapeError("shape mismatch in l1_loss");
    return F::l1_loss(pred, target);
}

torch::Tensor kl_loss(const torch::Tensor& mean, const torch::Tensor& logvar) {
    if (mean.sizes() != logvar.sizes()) throw ShapeError("mean/logvar width mismatch");
    auto kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar);
    return kl.flatten(1).sum(1).mean();
}

}  // namespace modim::losses

namespace modim::metrics {

namespace {

struct Overlap {
    double inter = 0, a = 0, b = 0, uni = 0;
};

std::vector<Overlap> class_overlaps(const torch::Tensor& pred, const torch::Tensor& target,
                                    int64_t num_classes) {
    auto p = pred.reshape({-1}).to(torch::kLong);
    auto t = target.reshape({-1}).to(torch::kLong);
    TORCH_CHECK(p.numel() == t.numel(), "shape mismatch between prediction and target");
    auto pa = p.accessor<int64_t, 1>();
    auto ta = t.accessor<int64_t, 1>();
    std::vector<Overlap> ov(static_cast<size_t>(num_classes));
    for (int64_t i = 0; i < p.numel(); ++i) {
        const int64_t pc = pa[i], tc = ta[i];
        TORCH_CHECK(pc >= 0 && pc < num_classes && tc >= 0 && tc < num_classes,
                    "label outside [0, num_classes)");
        ov[static_cast<size_t>(pc)].a += 1;
        ov[static_cast<size_t>(tc)].b += 1;
        if (pc == tc) ov[static_cast<size_t>(pc)].inter += 1;
    }
    for (auto& o : ov) o.uni = o.a + o.b - o.inter;
    return ov;
}

double foreground_mean(const std::vector<Overlap>& ov, bool dice) {
    double sum = 0;
    int64_t counted = 0;
    for (size_t c = 1; c < ov.size(); ++c) {
        const auto& o = ov[c];
        if (o.a == 0 && o.b == 0) continue;  // absent from both: excluded
        sum += dice ? 2.0 * o.inter / (o.a + o.b) : o.inter / o.uni;
        ++counted;
    }
    return counted ? sum / static_cast<double>(counted) : 1.0;
}

}  // namespace

double dice_score(const torch::Tensor& pred_labels, const torch::Tensor& target,
                  int64_t num_classes) {
    return foreground_mean(class_overlaps(pred_labels, target, num_classes), true);
}

double miou(const torch::Tensor& pred_labels, const torch::Tensor& target, int64_t num_classes) {
    return foreground_mean(class_overlaps(pred_labels, target, num_classes), false);
}

double psnr(const torch::Tensor& pred, const torch::Tensor& target, double max_value) {
    TORCH_CHECK(pred.sizes() == target.sizes(), "shape mismatch in psnr");
    auto diff = (pred.to(torch::kDouble) - target.to(torch::kDouble));
    const double mse = diff.pow(2).mean().item<double>();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / mse);
}

namespace {

std::vector<double> gaussian_kernel(int64_t n, double sigma) {
    std::vector<double> k(static_cast<size_t>(n));
    const double c = (static_cast<double>(n) - 1.0) / 2.0;
    double sum = 0;
    for (int64_t i = 0; i < n; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// SSIM for one (d1..dk) map pair, valid window positions only.
double ssim_map(const torch::Tensor& a, const torch::Tensor& b, int64_t win, double sigma,
                double c1, double c2) {
    const auto dims = a.sizes().vec();
    const int64_t rank = static_cast<int64_t>(dims.size());
    auto kern = gaussian_kernel(win, sigma);

    auto aa = a.contiguous();
    auto bb = b.contiguous();
    const double* pa = aa.data_ptr<double>();
    const double* pb = bb.data_ptr<double>();

    std::vector<int64_t> stride(static_cast<size_t>(rank), 1);
    for (int64_t i = rank - 2; i >= 0; --i) stride[static_cast<size_t>(i)] = stride[static_cast<size_t>(i + 1)] * dims[static_cast<size_t>(i + 1)];

    std::vector<int64_t> valid(static_cast<size_t>(rank));
    int64_t positions = 1;
    for (int64_t i = 0; i < rank; ++i) {
        valid[static_cast<size_t>(i)] = dims[static_cast<size_t>(i)] - win + 1;
        TORCH_CHECK(valid[static_cast<size_t>(i)] >= 1, "ssim window larger than image");
        positions *= valid[static_cast<size_t>(i)];
    }

    double total = 0;
    std::vector<int64_t> pos(static_cast<size_t>(rank), 0);
    std::vector<int64_t> off(static_cast<size_t>(rank), 0);
    for (int64_t p = 0; p < positions; ++p) {
        double mu_a = 0, mu_b = 0, saa = 0, sbb = 0, sab = 0;
        std::fill(off.begin(), off.end(), 0);
        const int64_t wcount = rank == 2 ? win * win : win * win * win;
        for (int64_t w = 0; w < wcount; ++w) {
            double wgt = 1;
            int64_t idx = 0;
            for (int64_t i = 0; i < rank; ++i) {
                wgt *= kern[static_cast<size_t>(off[static_cast<size_t>(i)])];
                idx += (pos[static_cast<size_t>(i)] + off[static_cast<size_t>(i)]) * stride[static_cast<size_t>(i)];
            }
            const double va = pa[idx], vb = pb[idx];
            mu_a += wgt * va;
            mu_b += wgt * vb;
            saa += wgt * va * va;
            sbb += wgt * vb * vb;
            sab += wgt * va * vb;
            for (int64_t i = rank - 1; i >= 0; --i) {
                if (++off[static_cast<size_t>(i)] < win) break;
                off[static_cast<size_t>(i)] = 0;
            }
        }
        const double var_a = saa - mu_a * mu_a;
        const double var_b = sbb - mu_b * mu_b;
        const double cov = sab - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        for (int64_t i = rank - 1; i >= 0; --i) {
            if (++pos[static_cast<size_t>(i)] < valid[static_cast<size_t>(i)]) break;
            pos[static_cast<size_t>(i)] = 0;
        }
    }
    return total / static_cast<double>(positions);
}

}  // namespace

double ssim(const torch::Tensor& pred, const torch::Tensor& target, double max_value,
            int64_t window, double sigma) {
    TORCH_CHECK(pred.sizes() == target.sizes(), "shape mismatch in ssim");
    auto a = pred.to(torch::kDouble);
    auto b = target.to(torch::kDouble);
    if (a.dim() == 2 || a.dim() == 3) {
        a = a.unsqueeze(0).unsqueeze(0);
        b = b.unsqueeze(0).unsqueeze(0);
    }
    const int64_t rank = spatial_rank_of(a);
    int64_t min_dim = a.size(2);
    for (int64_t i = 0; i < rank; ++i) min_dim = std::min(min_dim, a.size(i + 2));
    int64_t win = std::min(window, min_dim);
    if (win % 2 == 0) --win;
    TORCH_CHECK(win >= 1, "ssim needs a positive window");

    const double c1 = (0.01 * max_value) * (0.01 * max_value);
    const double c2 = (0.03 * max_value) * (0.03 * max_value);

    double total = 0;
    int64_t count = 0;
    for (int64_t n = 0; n < a.size(0); ++n)
        for (int64_t c = 0; c < a.size(1); ++c) {
            total += ssim_map(a[n][c], b[n][c], win, sigma, c1, c2);
            ++count;
        }
    return total / static_cast<double>(count);
}

}  // namespace modim::metrics
