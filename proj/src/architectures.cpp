#include "modim/architectures.hpp"

#include <cmath>

#include "modim/losses.hpp"

namespace F = torch::nn::functional;

namespace modim::arch {

// ---------------------------------------------------------------------------
// NoiseSchedule
// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int64_t steps) {
    TORCH_CHECK(steps >= 1, "noise schedule needs at least one step");
    // Linear variance schedule, rescaled so the endpoints stay put for any T.
    const double scale = 1000.0 / static_cast<double>(steps);
    auto betas = torch::linspace(1e-4, 0.02, steps, torch::kDouble) * scale;
    betas = betas.clamp(0.0, 0.999);
    auto abar = torch::cumprod(1.0 - betas, 0);
    NoiseSchedule s;
    s.alpha = abar.sqrt();
    s.beta = (1.0 - abar).sqrt();
    return s;
}

void NoiseSchedule::validate(double tol) const {
    TORCH_CHECK(alpha.sizes() == beta.sizes(), "alpha/beta length mismatch");
    auto unit = (alpha.pow(2) + beta.pow(2) - 1.0).abs().max().item<double>();
    TORCH_CHECK(unit <= tol, "schedule violates alpha^2 + beta^2 = 1 by ", unit);
    auto diffs = alpha.diff();
    TORCH_CHECK((diffs <= 1e-12).all().item<bool>(), "alpha must be non-increasing");
    TORCH_CHECK(std::abs(alpha[0].item<double>() - 1.0) <= 1e-3, "alpha_0 must be ~1");
    TORCH_CHECK(alpha[steps() - 1].item<double>() <= 1e-2, "alpha_{T-1} must be ~0");
}

torch::Tensor ddpm_forward_noising(const torch::Tensor& x, const torch::Tensor& tsteps,
                                   const torch::Tensor& eps, const NoiseSchedule& s) {
    TORCH_CHECK(eps.sizes() == x.sizes(), "noise must match the image shape");
    auto t = tsteps.to(torch::kLong).reshape({-1});
    TORCH_CHECK(t.size(0) == x.size(0), "one step index per batch element");
    TORCH_CHECK((t >= 0).all().item<bool>() && (t < s.steps()).all().item<bool>(),
                "diffusion step out of range [0, T)");
    auto a = s.alpha.index_select(0, t).to(x.dtype());
    auto b = s.beta.index_select(0, t).to(x.dtype());
    while (a.dim() < x.dim()) {
        a = a.unsqueeze(-1);
        b = b.unsqueeze(-1);
    }
    return a * x + b * eps;
}

namespace {

torch::Tensor checked_eps(const NoisePredictor& model, const torch::Tensor& x_t,
                          const torch::Tensor& tsteps, int64_t t) {
    auto eps = model(x_t, tsteps);
    TORCH_CHECK(eps.sizes() == x_t.sizes(), "noise predictor output shape mismatch at step ", t);
    if (!torch::isfinite(eps).all().item<bool>())
        throw std::runtime_error("noise predictor produced non-finite values at step " +
                                 std::to_string(t));
    return eps;
}

}  // namespace

torch::Tensor ddim_sample(const NoisePredictor& eps_model, std::vector<int64_t> shape,
                          const NoiseSchedule& s, int64_t num_steps, double eta,
                          at::Generator gen) {
    const int64_t T = s.steps();
    TORCH_CHECK(num_steps >= 1 && num_steps <= T, "num_steps must be in [1, T]");
    TORCH_CHECK(eta >= 0.0 && eta <= 1.0, "eta must be in [0, 1]");

    std::vector<int64_t> taus;
    for (int64_t j = 0; j < num_steps; ++j) taus.push_back(j * T / num_steps);
    taus.back() = T - 1;

    torch::NoGradGuard ng;
    auto x = torch::randn(shape, gen, torch::kFloat);
    const int64_t batch = shape[0];
    for (int64_t j = num_steps - 1; j >= 0; --j) {
        const int64_t t = taus[static_cast<size_t>(j)];
        const double abar = std::pow(s.alpha[t].item<double>(), 2);
        const double abar_prev =
            j > 0 ? std::pow(s.alpha[taus[static_cast<size_t>(j - 1)]].item<double>(), 2) : 1.0;
        auto tsteps = torch::full({batch}, t, torch::kLong);
        auto eps = checked_eps(eps_model, x, tsteps, t);

        auto x0 = (x - std::sqrt(1.0 - abar) * eps) / std::sqrt(abar);
        const double sigma =
            eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) * std::sqrt(1.0 - abar / abar_prev);
        const double dir = std::sqrt(std::max(1.0 - abar_prev - sigma * sigma, 0.0));
        x = std::sqrt(abar_prev) * x0 + dir * eps;
        if (sigma > 0.0 && j > 0) x = x + sigma * torch::randn(shape, gen, torch::kFloat);
    }
    return x;
}

torch::Tensor ddpm_sample(const NoisePredictor& eps_model, std::vector<int64_t> shape,
                          const NoiseSchedule& s, at::Generator gen) {
    const int64_t T = s.steps();
    torch::NoGradGuard ng;
    auto x = torch::randn(shape, gen, torch::kFloat);
    const int64_t batch = shape[0];
    for (int64_t t = T - 1; t >= 0; --t) {
        const double abar = std::pow(s.alpha[t].item<double>(), 2);
        const double abar_prev = t > 0 ? std::pow(s.alpha[t - 1].item<double>(), 2) : 1.0;
        const double beta_hat = 1.0 - abar / abar_prev;
        auto tsteps = torch::full({batch}, t, torch::kLong);
        auto eps = checked_eps(eps_model, x, tsteps, t);

        auto x0 = (x - std::sqrt(1.0 - abar) * eps) / std::sqrt(abar);
        // posterior q(x_{t-1} | x_t, x0)
        auto mean = (std::sqrt(abar_prev) * beta_hat * x0 +
                     std::sqrt(1.0 - beta_hat) * (1.0 - abar_prev) * x) /
                    (1.0 - abar);
        const double var = beta_hat * (1.0 - abar_prev) / (1.0 - abar);
        x = mean;
        if (t > 0) x = x + std::sqrt(var) * torch::randn(shape, gen, torch::kFloat);
    }
    return x;
}

torch::Tensor ensemble_generate(const std::function<torch::Tensor(int64_t)>& sample_once,
                                int64_t k) {
    TORCH_CHECK(k >= 1, "ensemble size must be >= 1");
    auto acc = sample_once(0);
    for (int64_t i = 1; i < k; ++i) acc = acc + sample_once(i);
    return acc / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Rescaling and pyramid loss
// ---------------------------------------------------------------------------

torch::Tensor scale_to(const torch::Tensor& x, const std::vector<int64_t>& target_dims,
                       bool labels) {
    const bool bare = x.dim() == static_cast<int64_t>(target_dims.size()) + 1;  // (B, d..)
    auto v = bare ? x.unsqueeze(1) : x;
    TORCH_CHECK(v.dim() == static_cast<int64_t>(target_dims.size()) + 2,
                "scale_to rank mismatch");
    if (spatial_dims_of(v) == target_dims) return x;

    const bool integral = !torch::isFloatingType(v.scalar_type());
    auto inp = integral ? v.to(torch::kFloat) : v;
    auto opt = F::InterpolateFuncOptions().size(target_dims);
    if (labels || integral) opt = opt.mode(torch::kNearest);
    else if (target_dims.size() == 2) opt = opt.mode(torch::kBilinear).align_corners(false);
    else opt = opt.mode(torch::kTrilinear).align_corners(false);
    auto out = F::interpolate(inp, opt);
    if (integral) out = out.round().to(v.scalar_type());
    return bare ? out.squeeze(1) : out;
}

torch::Tensor pyramid_loss(const torch::Tensor& target, const std::vector<torch::Tensor>& decoded,
                           const BaseLoss& base, bool target_is_labels) {
    TORCH_CHECK(!decoded.empty(), "pyramid loss needs at least one prediction");
    torch::Tensor sum;
    for (const auto& pred : decoded) {
        auto t = scale_to(target, spatial_dims_of(pred), target_is_labels);
        auto l = base(pred, t);
        sum = sum.defined() ? sum + l : l;
    }
    return sum / static_cast<double>(decoded.size());
}

torch::Tensor h_model_loss(const torch::Tensor& final_pred, const torch::Tensor& target,
                           const PyramidOutput& pyr, const BaseLoss& base, bool target_is_labels) {
    auto top = base(final_pred, target);
    if (pyr.lambda == 0.0) return top;
    return top + pyr.lambda * pyramid_loss(target, pyr.decoded, base, target_is_labels);
}

// ---------------------------------------------------------------------------
// Task losses
// ---------------------------------------------------------------------------

torch::Tensor sem_loss(const torch::Tensor& logits, const torch::Tensor& target, double ce_weight,
                       double dice_weight) {
    auto ce = losses::cross_entropy_loss(logits, target);
    auto dice = losses::dice_loss(torch::softmax(logits, 1), target);
    return ce_weight * ce + dice_weight * dice;
}

torch::Tensor ae_loss(const torch::Tensor& pred, const torch::Tensor& target,
                      const std::string& recon) {
    return recon == "l1" ? losses::l1_loss(pred, target) : losses::mse_loss(pred, target);
}

torch::Tensor vae_regularizer(const torch::Tensor& mean, const torch::Tensor& logvar) {
    return losses::kl_loss(mean, logvar);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.resolve();
    const auto& es = cfg_.encoder;
    const auto sched = es.resolved_schedule();
    const int64_t nd = es.downs();
    const int64_t out_ch = cfg_.resolved_out_channels();

    enc_ = register_module("encoder", std::make_shared<codec::Encoder>(es));
    dec_ = register_module("decoder", std::make_shared<codec::Decoder>(
                                          es, out_ch, !is_hierarchical(cfg_.architecture)));

    if (cfg_.context.condition == "image") {
        context::ConditionEncoder::Opts eo;
        eo.side = context::ConditionEncoder::Side::EncoderSide;
        eo.rank = es.rank;
        eo.in_channels = cfg_.context.condition_channels;
        eo.out_channels = es.in_channels;
        eo.identity = cfg_.context.condition_encoder == "identity";
        cond_e_ = register_module("cond_e", std::make_shared<context::ConditionEncoder>(eo));

        context::ConditionEncoder::Opts don;
        don.side = context::ConditionEncoder::Side::DecoderSide;
        don.rank = es.rank;
        don.in_channels = cfg_.context.share_condition_trunk ? es.in_channels
                                                             : cfg_.context.condition_channels;
        don.patch = es.patch();
        don.down_channels = sched;
        don.dense_latent = es.dense_latent;
        don.latent_dims = es.latent_dims();
        cond_d_ = register_module("cond_d", std::make_shared<context::ConditionEncoder>(don));
    }

    if (cfg_.context.num_classes > 0)
        label_embed_ = register_module(
            "label_embed",
            std::make_shared<context::LabelEmbed>(cfg_.context.num_classes, cfg_.context.ctx_dim));

    if (cfg_.architecture == ArchKind::Vae) {
        vae_mean_ = register_module("vae_mean", torch::nn::Linear(es.dense_latent, es.dense_latent));
        vae_logvar_ =
            register_module("vae_logvar", torch::nn::Linear(es.dense_latent, es.dense_latent));
    }

    if (is_hierarchical(cfg_.architecture)) {
        const int64_t common = sched[0];
        for (int64_t i = 0; i <= nd; ++i) {  // stage i: coarse (z) .. fine
            const int64_t ci = sched[nd - i];
            const auto dims = es.stage_dims(nd - i);
            auto blockp = codec::make_stage_block(es, ci, dims, 0, es.ctx_dim > 0);
            register_module("head_block" + std::to_string(i), blockp);
            head_blocks_.push_back(blockp);
            auto mapp = codec::make_fusion(es, ci, common);
            register_module("head_map" + std::to_string(i), mapp);
            head_maps_.push_back(mapp);
            auto decp = std::make_shared<codec::PatchDecode>(es.rank, common, out_ch, es.patch());
            register_module("head_decode" + std::to_string(i), decp);
            head_decodes_.push_back(decp);
            pos_enc_.push_back(
                register_parameter("pos_enc" + std::to_string(i), torch::zeros({common})));
        }
        combo_decode_ = register_module(
            "combo_decode",
            std::make_shared<codec::PatchDecode>(es.rank, (nd + 1) * common, out_ch, es.patch()));
    }

    sched_ = NoiseSchedule::linear(cfg_.diffusion.steps);
}

torch::Tensor Model::context_vector(const torch::Tensor& tsteps, const torch::Tensor& labels,
                                    int64_t batch) {
    torch::Tensor ctx;
    if (tsteps.defined()) {
        if (!cfg_.context.time)
            throw ConfigError("time context supplied to a model built without time embedding");
        ctx = context::sinusoidal_embed_batch(tsteps, cfg_.context.ctx_dim);
        if (ctx.size(0) == 1 && batch > 1) ctx = ctx.expand({batch, ctx.size(1)}).contiguous();
    }
    if (labels.defined()) {
        if (!label_embed_)
            throw ConfigError("class labels supplied to a model built without class context");
        auto l = label_embed_->forward(labels);
        ctx = ctx.defined() ? ctx + l : l;
    }
    return ctx;
}

ModelOut Model::forward_full(const torch::Tensor& x, const RunCtx& rc, const torch::Tensor& cond,
                             const torch::Tensor& tsteps, const torch::Tensor& labels) {
    check_patch_grid(x, cfg_.encoder.rank, cfg_.encoder.in_channels);
    if (cond.defined() && !cond_e_)
        throw ConfigError("condition image supplied to a model built without condition encoding");

    RunCtx rci = rc;
    rci.ctx = context_vector(tsteps, labels, x.size(0));

    auto xin = x;
    if (cond.defined()) xin = x + cond_e_->forward(cond);

    auto bundle = enc_->forward(xin, rci);

    ModelOut out;
    if (cfg_.architecture == ArchKind::Vae) {
        out.vae_mean = vae_mean_(bundle.z);
        out.vae_logvar = vae_logvar_(bundle.z);
        if (rci.training) {
            TORCH_CHECK(rci.gen.defined(), "vae sampling while training requires an RNG stream");
            auto eps = torch::randn(out.vae_mean.sizes(), rci.gen, out.vae_mean.options());
            bundle.z = out.vae_mean + torch::exp(0.5 * out.vae_logvar) * eps;
        } else {
            bundle.z = out.vae_mean;
        }
    }

    if (cond.defined() && cond_d_) {
        auto c_in = cfg_.context.share_condition_trunk ? cond_e_->forward(cond) : cond;
        bundle.z = bundle.z + cond_d_->forward(c_in);
    }

    const bool hier = is_hierarchical(cfg_.architecture);
    auto dec = dec_->forward(bundle, rci, hier);

    if (!hier) {
        out.y = dec.y;
        return out;
    }

    PyramidOutput pyr;
    pyr.lambda = cfg_.loss.lambda;
    const int64_t n = static_cast<int64_t>(dec.stages.size());
    for (int64_t i = 0; i < n; ++i) {
        auto f = head_blocks_[static_cast<size_t>(i)]->forward(dec.stages[static_cast<size_t>(i)], rci);
        f = head_maps_[static_cast<size_t>(i)]->forward(f, rci);
        pyr.predictions.push_back(f);
        pyr.position_encodings.push_back(pos_enc_[static_cast<size_t>(i)]);
        pyr.decoded.push_back(head_decodes_[static_cast<size_t>(i)]->forward(f));
    }
    const auto finest = spatial_dims_of(pyr.predictions.back());
    std::vector<torch::Tensor> stacked;
    for (int64_t i = 0; i < n; ++i) {
        auto p = pos_enc_[static_cast<size_t>(i)];
        while (p.dim() < pyr.predictions[static_cast<size_t>(i)].dim() - 1) p = p.unsqueeze(-1);
        stacked.push_back(scale_to(pyr.predictions[static_cast<size_t>(i)], finest) + p.unsqueeze(0));
    }
    auto combo = combo_decode_->forward(torch::cat(stacked, 1));
    // crop away any patch padding, as the main decode path does
    std::vector<int64_t> want = spatial_dims_of(x);
    for (size_t i = 0; i < want.size(); ++i) {
        int64_t cur = combo.size(static_cast<int64_t>(i) + 2);
        if (cur != want[i]) combo = combo.narrow(static_cast<int64_t>(i) + 2, (cur - want[i]) / 2, want[i]);
    }
    out.y = combo;
    out.pyramid = std::move(pyr);
    return out;
}

torch::Tensor Model::forward(const torch::Tensor& x, const RunCtx& rc, const torch::Tensor& cond,
                             const torch::Tensor& tsteps, const torch::Tensor& labels) {
    return forward_full(x, rc, cond, tsteps, labels).y;
}

torch::Tensor Model::training_loss(const torch::Tensor& x, const torch::Tensor& target,
                                   const torch::Tensor& cond, const torch::Tensor& labels,
                                   const RunCtx& rc) {
    switch (cfg_.architecture) {
        case ArchKind::Sem:
        case ArchKind::HSem: {
            TORCH_CHECK(target.defined(), "segmentation training needs a label map");
            auto out = forward_full(x, rc, cond, {}, labels);
            BaseLoss base = [this](const torch::Tensor& p, const torch::Tensor& t) {
                return sem_loss(p, t, cfg_.loss.ce_weight, cfg_.loss.dice_weight);
            };
            if (out.pyramid) return h_model_loss(out.y, target, *out.pyramid, base, true);
            return base(out.y, target);
        }
        case ArchKind::Ae:
        case ArchKind::HAe:
        case ArchKind::Vae: {
            auto tgt = target.defined() ? target : x;  // supervised target permitted
            auto out = forward_full(x, rc, cond, {}, labels);
            BaseLoss base = [this](const torch::Tensor& p, const torch::Tensor& t) {
                return ae_loss(p, t, cfg_.loss.recon);
            };
            auto l = out.pyramid ? h_model_loss(out.y, tgt, *out.pyramid, base, false)
                                 : base(out.y, tgt);
            if (cfg_.architecture == ArchKind::Vae)
                l = l + cfg_.loss.kl_weight * vae_regularizer(out.vae_mean, out.vae_logvar);
            return l;
        }
        case ArchKind::Ddpm: {
            TORCH_CHECK(rc.gen.defined(), "ddpm training loss requires an RNG stream");
            const int64_t T = sched_.steps();
            auto t = torch::randint(0, T, {x.size(0)}, rc.gen, torch::TensorOptions(torch::kLong));
            auto eps = torch::randn(x.sizes(), rc.gen, x.options());
            auto x_t = ddpm_forward_noising(x, t, eps, sched_);
            auto pred = forward(x_t, rc, cond, t, labels);
            return losses::mse_loss(pred, eps);
        }
    }
    throw ConfigError("unknown architecture");
}

NoisePredictor Model::predictor(const torch::Tensor& cond) {
    return [this, cond](const torch::Tensor& x_t, const torch::Tensor& tsteps) {
        torch::NoGradGuard ng;
        return forward(x_t, RunCtx::eval(), cond, tsteps);
    };
}

torch::Tensor Model::generate(int64_t n, const torch::Tensor& cond, int64_t k_ensemble,
                              int64_t num_steps, double eta, at::Generator gen) {
    TORCH_CHECK(cfg_.architecture == ArchKind::Ddpm, "generate() is a ddpm operation");
    std::vector<int64_t> shape{cond.defined() ? cond.size(0) : n, cfg_.encoder.in_channels};
    for (int64_t d : cfg_.encoder.input_size) shape.push_back(d);
    auto pred = predictor(cond);
    auto once = [&](int64_t) { return ddim_sample(pred, shape, sched_, num_steps, eta, gen); };
    return ensemble_generate(once, k_ensemble);
}

}  // namespace modim::arch
