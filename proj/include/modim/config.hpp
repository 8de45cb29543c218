#pragma once

#include <string>

#include "modim/codec.hpp"
#include "modim/common.hpp"

namespace modim {

enum class ArchKind { Sem, HSem, Ae, HAe, Vae, Ddpm };

ArchKind arch_from_string(const std::string& s);
std::string to_string(ArchKind a);
bool is_hierarchical(ArchKind a);
// segmentation / reconstruction / generation
std::string task_of(ArchKind a);

struct ContextOpts {
    bool time = false;               // sinusoidal time-step embedding (forced on for ddpm)
    int64_t num_classes = 0;         // > 0 enables class-label conditioning
    std::string condition = "none";  // none | image
    int64_t ctx_dim = 0;             // 0 = 4x the base channel width
    int64_t condition_channels = 1;
    std::string condition_encoder = "conv";  // conv | identity
    bool share_condition_trunk = false;      // decoder-side trunk reuses the encoder-side features
};

struct LossOpts {
    double lambda = 1.0;  // pyramid weight
    double ce_weight = 1.0;
    double dice_weight = 1.0;
    std::string recon = "mse";  // mse | l1
    double kl_weight = 1.0;
};

struct DiffusionOpts {
    int64_t steps = 1000;
    std::string schedule = "linear";
    int64_t sample_steps = 50;  // ddim subset size
    double eta = 0.0;
    int64_t ensemble = 1;
};

struct TrainOpts {
    std::string optimizer = "adam";
    double lr = 3e-4;
    int64_t epochs = 500;
    int64_t batch_size = 2;
    uint64_t seed = 42;
    std::string lr_schedule = "linear";  // linear | constant
    int64_t num_workers = 0;
};

struct DataOpts {
    std::string root;
};

struct ModelConfig {
    ArchKind architecture = ArchKind::Sem;
    int64_t out_channels = 0;  // 0 = task default (2 classes for sem; in_channels otherwise)
    codec::EncoderSpec encoder;
    ContextOpts context;
    LossOpts loss;
    DiffusionOpts diffusion;
    TrainOpts training;
    DataOpts data;

    // Fills derived defaults and checks every cross-field invariant; throws
    // ConfigError naming the violated rule.
    void resolve();
    int64_t resolved_out_channels() const;
    bool uses_context() const { return context.time || context.num_classes > 0; }
};

// Strict parser: unknown keys are rejected; unset fields take documented
// defaults and are echoed back by emit_config.
ModelConfig parse_config(const std::string& json_text);
ModelConfig parse_config_file(const std::string& path);
std::string emit_config(const ModelConfig& cfg);

}  // namespace modim
