#pragma once

#include <torch/torch.h>

#include <map>
#include <string>
#include <vector>

#include "modim/architectures.hpp"
#include "modim/config.hpp"
#include "modim/data.hpp"

namespace modim::harness {

// Seeds the substrate RNG and instantiates the configured model.
arch::ModelPtr build_model(const ModelConfig& cfg);

// Linear decay from training.lr at epoch 0 to 0 at the final epoch.
double lr_at(const TrainOpts& t, int64_t epoch);

struct EpochLog {
    int64_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double val_loss = 0;
    std::map<std::string, double> metrics;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::string checkpoint;  // best-validation checkpoint path
    double best_val = 0;
    int64_t best_epoch = -1;
};

// Adam training loop with per-epoch validation; keeps the best-val checkpoint
// under out_dir and writes metrics.csv. Deterministic given the config seed.
TrainResult train(arch::Model& model, const data::Dataset& train_ds, const data::Dataset& val_ds,
                  const std::string& out_dir);

struct MetricReport {
    std::map<std::string, double> values;
    int64_t count = 0;
    std::string to_table() const;
};

// Task metrics over a split: Dice/mIoU for segmentation, PSNR/SSIM/MSE for
// reconstruction, noise-prediction MSE (plus conditional reconstruction
// metrics when inputs are present) for generation.
MetricReport evaluate(arch::Model& model, const data::Dataset& ds);

// Generates with the ddpm sampler (ensemble mean of k samples).
torch::Tensor sample(arch::Model& model, int64_t n, const torch::Tensor& condition,
                     int64_t k_ensemble, at::Generator gen);

// Self-describing checkpoint: config echo + parameters + buffers.
void save_checkpoint(arch::Model& model, const std::string& path);
arch::ModelPtr load_checkpoint(const std::string& path);

// Dataset helpers: 5-fold split (3 train / 1 val / 1 test) by the config seed.
data::Dataset load_split(const ModelConfig& cfg, const std::string& which);

int64_t count_parameters(const torch::nn::Module& m);
// Names of parameters whose gradient is missing or identically zero.
std::vector<std::string> zero_grad_parameters(const torch::nn::Module& m);

// ---------------------------------------------------------------------------
// Profiler
// ---------------------------------------------------------------------------

struct ProfileRow {
    std::string block;
    int64_t layers = 0;
    std::vector<int64_t> patch_dims;
    int64_t params = 0;
    double memory_gb = -1;  // < 0 when unavailable
    double train_time_s = 0;
    double infer_time_s = 0;
    bool failed = false;
    std::string error;
};

struct ProfileReport {
    std::vector<ProfileRow> rows;
    std::string memory_source;  // "peak_rss" or "unavailable"
    int64_t iters = 0;
    int64_t batch = 0;
    std::string to_table() const;
};

// Builds one segmentation model per (block kind x layer count x patch dims)
// row and measures exact parameter count, wall-clock for `iters` training and
// inference iterations, and peak memory where the platform exposes it.
// Out-of-memory rows are recorded as failed and the run continues.
ProfileReport profile(const std::vector<std::string>& block_kinds,
                      const std::vector<int64_t>& layer_counts,
                      const std::vector<std::vector<int64_t>>& patch_dims, int64_t iters,
                      int64_t batch);

// Model construction used by the profiler rows (exposed for tests).
ModelConfig profile_config(const std::string& block_kind, int64_t layers,
                           const std::vector<int64_t>& patch_dims);

}  // namespace modim::harness
