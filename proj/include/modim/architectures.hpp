#pragma once

#include <torch/torch.h>

#include <functional>
#include <optional>
#include <vector>

#include "modim/codec.hpp"
#include "modim/common.hpp"
#include "modim/config.hpp"
#include "modim/context.hpp"

namespace modim::arch {

// ---------------------------------------------------------------------------
// Diffusion
// ---------------------------------------------------------------------------

// Per-step coefficient pair for x_t = alpha_t * x + beta_t * eps, in the
// variance-preserving form alpha_t^2 + beta_t^2 = 1.
struct NoiseSchedule {
    torch::Tensor alpha;  // (T,), double
    torch::Tensor beta;   // (T,), double

    int64_t steps() const { return alpha.size(0); }
    static NoiseSchedule linear(int64_t steps);
    // Checks alpha^2 + beta^2 = 1, monotonicity, and the endpoint conditions.
    void validate(double tol = 1e-6) const;
};

// x_t = alpha_t x + beta_t eps, with per-sample steps (B,).
torch::Tensor ddpm_forward_noising(const torch::Tensor& x, const torch::Tensor& tsteps,
                                   const torch::Tensor& eps, const NoiseSchedule& s);

using NoisePredictor =
    std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& tsteps)>;

// Ancestral reverse chain over all T steps.
torch::Tensor ddpm_sample(const NoisePredictor& eps_model, std::vector<int64_t> shape,
                          const NoiseSchedule& s, at::Generator gen);

// Reverse chain over a step subset; eta = 0 is deterministic given the initial
// noise, eta = 1 with num_steps = T matches the ancestral update.
torch::Tensor ddim_sample(const NoisePredictor& eps_model, std::vector<int64_t> shape,
                          const NoiseSchedule& s, int64_t num_steps, double eta, at::Generator gen);

// Pixel-wise mean of k samples drawn by `sample_once(i)`.
torch::Tensor ensemble_generate(const std::function<torch::Tensor(int64_t)>& sample_once, int64_t k);

// ---------------------------------------------------------------------------
// Multi-scale machinery
// ---------------------------------------------------------------------------

// Spatial resize to target_dims; nearest for label maps, (bi/tri)linear
// otherwise. Identity when the size already matches.
torch::Tensor scale_to(const torch::Tensor& x, const std::vector<int64_t>& target_dims,
                       bool labels = false);

struct PyramidOutput {
    std::vector<torch::Tensor> predictions;        // feature space, coarse -> fine
    std::vector<torch::Tensor> position_encodings; // p_i, one per scale
    std::vector<torch::Tensor> decoded;            // prediction space, coarse -> fine
    double lambda = 1.0;
};

using BaseLoss = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

// (1/n) sum_i base(pred_i, S(target, pred_i)): the target is rescaled to each
// prediction's resolution.
torch::Tensor pyramid_loss(const torch::Tensor& target, const std::vector<torch::Tensor>& decoded,
                           const BaseLoss& base, bool target_is_labels);

// base(final, target) + lambda * pyramid term.
torch::Tensor h_model_loss(const torch::Tensor& final_pred, const torch::Tensor& target,
                           const PyramidOutput& pyr, const BaseLoss& base, bool target_is_labels);

// ---------------------------------------------------------------------------
// Task losses
// ---------------------------------------------------------------------------

torch::Tensor sem_loss(const torch::Tensor& logits, const torch::Tensor& target,
                       double ce_weight = 1.0, double dice_weight = 1.0);
torch::Tensor ae_loss(const torch::Tensor& pred, const torch::Tensor& target,
                      const std::string& recon = "mse");
torch::Tensor vae_regularizer(const torch::Tensor& mean, const torch::Tensor& logvar);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelOut {
    torch::Tensor y;
    std::optional<PyramidOutput> pyramid;
    torch::Tensor vae_mean, vae_logvar;
};

// The assembled encoder-decoder with context channels and the architecture's
// heads. Forward follows z = E(x + Ce(c), T(t)); y = D(z + Cd(c), T(t)).
class Model : public torch::nn::Module {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return sched_; }

    torch::Tensor forward(const torch::Tensor& x, const RunCtx& rc, const torch::Tensor& cond = {},
                          const torch::Tensor& tsteps = {}, const torch::Tensor& labels = {});
    ModelOut forward_full(const torch::Tensor& x, const RunCtx& rc, const torch::Tensor& cond = {},
                          const torch::Tensor& tsteps = {}, const torch::Tensor& labels = {});

    // The loss the trainer optimizes. `target` is the mask (segmentation), the
    // reconstruction target (defaults to x when undefined), or ignored (ddpm).
    torch::Tensor training_loss(const torch::Tensor& x, const torch::Tensor& target,
                                const torch::Tensor& cond, const torch::Tensor& labels,
                                const RunCtx& rc);

    // Diffusion sampling (ddpm architectures only). Ensemble of k samples.
    torch::Tensor generate(int64_t n, const torch::Tensor& cond, int64_t k_ensemble,
                           int64_t num_steps, double eta, at::Generator gen);

    NoisePredictor predictor(const torch::Tensor& cond);

private:
    torch::Tensor context_vector(const torch::Tensor& tsteps, const torch::Tensor& labels,
                                 int64_t batch);

    ModelConfig cfg_;
    std::shared_ptr<codec::Encoder> enc_;
    std::shared_ptr<codec::Decoder> dec_;
    std::shared_ptr<context::ConditionEncoder> cond_e_, cond_d_;
    std::shared_ptr<context::LabelEmbed> label_embed_;
    torch::nn::Linear vae_mean_{nullptr}, vae_logvar_{nullptr};

    // hierarchical heads: per stage a building block, a channel map to the
    // common width, a decode block, and a learnable position encoding.
    std::vector<blocks::BlockPtr> head_blocks_;
    std::vector<blocks::BlockPtr> head_maps_;
    std::vector<std::shared_ptr<codec::PatchDecode>> head_decodes_;
    std::vector<torch::Tensor> pos_enc_;
    std::shared_ptr<codec::PatchDecode> combo_decode_;

    NoiseSchedule sched_;
};

using ModelPtr = std::shared_ptr<Model>;

}  // namespace modim::arch
