#include "modim/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace modim {

ArchKind arch_from_string(const std::string& s) {
    if (s == "sem") return ArchKind::Sem;
    if (s == "h_sem") return ArchKind::HSem;
    if (s == "ae") return ArchKind::Ae;
    if (s == "h_ae") return ArchKind::HAe;
    if (s == "vae") return ArchKind::Vae;
    if (s == "ddpm") return ArchKind::Ddpm;
    throw ConfigError("unknown architecture: " + s +
                      " (expected sem, h_sem, ae, h_ae, vae or ddpm)");
}

std::string to_string(ArchKind a) {
    switch (a) {
        case ArchKind::Sem: return "sem";
        case ArchKind::HSem: return "h_sem";
        case ArchKind::Ae: return "ae";
        case ArchKind::HAe: return "h_ae";
        case ArchKind::Vae: return "vae";
        case ArchKind::Ddpm: return "ddpm";
    }
    return "?";
}

bool is_hierarchical(ArchKind a) { return a == ArchKind::HSem || a == ArchKind::HAe; }

std::string task_of(ArchKind a) {
    switch (a) {
        case ArchKind::Sem:
        case ArchKind::HSem: return "segmentation";
        case ArchKind::Ae:
        case ArchKind::HAe:
        case ArchKind::Vae: return "reconstruction";
        case ArchKind::Ddpm: return "generation";
    }
    return "?";
}

int64_t ModelConfig::resolved_out_channels() const {
    if (out_channels > 0) return out_channels;
    return task_of(architecture) == "segmentation" ? 2 : encoder.in_channels;
}

void ModelConfig::resolve() {
    if (architecture == ArchKind::Vae) {
        if (encoder.u_shaped)
            throw ConfigError("vae keeps a dense latent; u_shaped must be false");
        if (encoder.dense_latent <= 0) encoder.dense_latent = 4 * encoder.resolved_schedule()[0];
    }
    if (architecture == ArchKind::Ddpm) context.time = true;
    if (uses_context() && context.ctx_dim <= 0) context.ctx_dim = 4 * encoder.resolved_schedule()[0];
    encoder.ctx_dim = uses_context() ? context.ctx_dim : 0;
    encoder.validate();

    if (context.condition != "none" && context.condition != "image")
        throw ConfigError("context.condition must be none or image");
    if (context.condition_encoder != "conv" && context.condition_encoder != "identity")
        throw ConfigError("context.condition_encoder must be conv or identity");
    if (loss.recon != "mse" && loss.recon != "l1")
        throw ConfigError("loss.recon must be mse or l1");
    if (loss.lambda < 0) throw ConfigError("loss.lambda must be >= 0");
    if (diffusion.steps < 1) throw ConfigError("diffusion.steps must be >= 1");
    if (diffusion.sample_steps < 1 || diffusion.sample_steps > diffusion.steps)
        throw ConfigError("diffusion.sample_steps must be in [1, steps]");
    if (diffusion.eta < 0.0 || diffusion.eta > 1.0) throw ConfigError("diffusion.eta must be in [0, 1]");
    if (diffusion.ensemble < 1) throw ConfigError("diffusion.ensemble must be >= 1");
    if (training.optimizer != "adam") throw ConfigError("training.optimizer must be adam");
    if (training.lr_schedule != "linear" && training.lr_schedule != "constant")
        throw ConfigError("training.lr_schedule must be linear or constant");
    if (training.epochs < 1 || training.batch_size < 1)
        throw ConfigError("training.epochs and batch_size must be >= 1");
    if (training.num_workers < 0 || training.num_workers > 1)
        throw ConfigError("training.num_workers must be 0 or 1");
}

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key: " + where + "." + it.key());
}

template <typename T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

codec::EncoderSpec parse_encoder(const json& j) {
    check_keys(j, "encoder",
               {"backbone", "rank", "in_channels", "base_channels", "channel_schedule", "num_down",
                "blocks_per_stage", "num_middle", "patch_size", "u_shaped", "dense_latent",
                "final_layers", "input_size", "window", "heads", "drop_path", "state_dim",
                "expand", "mlp_ratio"});
    codec::EncoderSpec e;
    if (j.contains("backbone")) e.backbone = codec::backbone_from_string(j.at("backbone").get<std::string>());
    get(j, "rank", e.rank);
    get(j, "in_channels", e.in_channels);
    get(j, "base_channels", e.base_channels);
    get(j, "channel_schedule", e.channel_schedule);
    get(j, "num_down", e.num_down);
    get(j, "blocks_per_stage", e.blocks_per_stage);
    get(j, "num_middle", e.num_middle);
    get(j, "patch_size", e.patch_size);
    get(j, "u_shaped", e.u_shaped);
    get(j, "dense_latent", e.dense_latent);
    get(j, "final_layers", e.final_layers);
    get(j, "input_size", e.input_size);
    get(j, "window", e.window);
    get(j, "heads", e.heads);
    get(j, "drop_path", e.drop_path);
    get(j, "state_dim", e.state_dim);
    get(j, "expand", e.expand);
    get(j, "mlp_ratio", e.mlp_ratio);
    if (e.input_size.empty()) e.input_size.assign(static_cast<size_t>(e.rank), 64);
    return e;
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, "config",
               {"architecture", "hierarchical", "out_channels", "encoder", "context", "loss",
                "diffusion", "training", "data"});

    ModelConfig cfg;
    if (j.contains("architecture")) cfg.architecture = arch_from_string(j.at("architecture").get<std::string>());
    if (j.contains("hierarchical") && j.at("hierarchical").get<bool>()) {
        switch (cfg.architecture) {
            case ArchKind::Sem: cfg.architecture = ArchKind::HSem; break;
            case ArchKind::Ae: cfg.architecture = ArchKind::HAe; break;
            case ArchKind::HSem:
            case ArchKind::HAe: break;
            case ArchKind::Vae:
                throw ConfigError("hierarchical feature fusion is not supported for vae");
            case ArchKind::Ddpm:
                throw ConfigError(
                    "hierarchical feature fusion is not supported for ddpm: the model predicts "
                    "noise, which has no multi-scale structure to fuse");
        }
    }
    get(j, "out_channels", cfg.out_channels);
    if (j.contains("encoder")) cfg.encoder = parse_encoder(j.at("encoder"));
    else cfg.encoder.input_size.assign(static_cast<size_t>(cfg.encoder.rank), 64);

    if (j.contains("context")) {
        const auto& c = j.at("context");
        check_keys(c, "context",
                   {"time", "num_classes", "condition", "ctx_dim", "condition_channels",
                    "condition_encoder", "share_condition_trunk"});
        get(c, "time", cfg.context.time);
        get(c, "num_classes", cfg.context.num_classes);
        get(c, "condition", cfg.context.condition);
        get(c, "ctx_dim", cfg.context.ctx_dim);
        get(c, "condition_channels", cfg.context.condition_channels);
        get(c, "condition_encoder", cfg.context.condition_encoder);
        get(c, "share_condition_trunk", cfg.context.share_condition_trunk);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        check_keys(l, "loss", {"lambda", "ce_weight", "dice_weight", "recon", "kl_weight"});
        get(l, "lambda", cfg.loss.lambda);
        get(l, "ce_weight", cfg.loss.ce_weight);
        get(l, "dice_weight", cfg.loss.dice_weight);
        get(l, "recon", cfg.loss.recon);
        get(l, "kl_weight", cfg.loss.kl_weight);
    }
    if (j.contains("diffusion")) {
        const auto& d = j.at("diffusion");
        check_keys(d, "diffusion", {"steps", "schedule", "sample_steps", "eta", "ensemble"});
        get(d, "steps", cfg.diffusion.steps);
        get(d, "schedule", cfg.diffusion.schedule);
        get(d, "sample_steps", cfg.diffusion.sample_steps);
        get(d, "eta", cfg.diffusion.eta);
        get(d, "ensemble", cfg.diffusion.ensemble);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        check_keys(t, "training",
                   {"optimizer", "lr", "epochs", "batch_size", "seed", "lr_schedule", "num_workers"});
        get(t, "optimizer", cfg.training.optimizer);
        get(t, "lr", cfg.training.lr);
        get(t, "epochs", cfg.training.epochs);
        get(t, "batch_size", cfg.training.batch_size);
        get(t, "seed", cfg.training.seed);
        get(t, "lr_schedule", cfg.training.lr_schedule);
        get(t, "num_workers", cfg.training.num_workers);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, "data", {"root"});
        get(d, "root", cfg.data.root);
    }

    cfg.resolve();
    return cfg;
}

ModelConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string emit_config(const ModelConfig& cfg) {
    json j;
    j["architecture"] = to_string(cfg.architecture);
    j["out_channels"] = cfg.resolved_out_channels();
    json e;
    e["backbone"] = codec::to_string(cfg.encoder.backbone);
    e["rank"] = cfg.encoder.rank;
    e["in_channels"] = cfg.encoder.in_channels;
    e["base_channels"] = cfg.encoder.base_channels;
    e["channel_schedule"] = cfg.encoder.resolved_schedule();
    e["num_down"] = cfg.encoder.downs();
    e["blocks_per_stage"] = cfg.encoder.blocks_per_stage;
    e["num_middle"] = cfg.encoder.num_middle;
    e["patch_size"] = cfg.encoder.patch();
    e["u_shaped"] = cfg.encoder.u_shaped;
    e["dense_latent"] = cfg.encoder.dense_latent;
    e["final_layers"] = cfg.encoder.final_layers;
    e["input_size"] = cfg.encoder.input_size;
    e["window"] = cfg.encoder.window;
    e["heads"] = cfg.encoder.heads;
    e["drop_path"] = cfg.encoder.drop_path >= 0 ? cfg.encoder.drop_path : cfg.encoder.default_drop_path();
    e["state_dim"] = cfg.encoder.state_dim;
    e["expand"] = cfg.encoder.expand;
    e["mlp_ratio"] = cfg.encoder.mlp_ratio;
    j["encoder"] = e;
    j["context"] = {{"time", cfg.context.time},
                    {"num_classes", cfg.context.num_classes},
                    {"condition", cfg.context.condition},
                    {"ctx_dim", cfg.context.ctx_dim},
                    {"condition_channels", cfg.context.condition_channels},
                    {"condition_encoder", cfg.context.condition_encoder},
                    {"share_condition_trunk", cfg.context.share_condition_trunk}};
    j["loss"] = {{"lambda", cfg.loss.lambda},
                 {"ce_weight", cfg.loss.ce_weight},
                 {"dice_weight", cfg.loss.dice_weight},
                 {"recon", cfg.loss.recon},
                 {"kl_weight", cfg.loss.kl_weight}};
    j["diffusion"] = {{"steps", cfg.diffusion.steps},
                      {"schedule", cfg.diffusion.schedule},
                      {"sample_steps", cfg.diffusion.sample_steps},
                      {"eta", cfg.diffusion.eta},
                      {"ensemble", cfg.diffusion.ensemble}};
    j["training"] = {{"optimizer", cfg.training.optimizer},
                     {"lr", cfg.training.lr},
                     {"epochs", cfg.training.epochs},
                     {"batch_size", cfg.training.batch_size},
                     {"seed", cfg.training.seed},
                     {"lr_schedule", cfg.training.lr_schedule},
                     {"num_workers", cfg.training.num_workers}};
    j["data"] = {{"root", cfg.data.root}};
    return j.dump(2);
}

}  // namespace modim
