#include <torch/torch.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "modim/harness.hpp"
#include "modim/image_io.hpp"

namespace fs = std::filesystem;
using namespace modim;

namespace {

std::vector<int64_t> parse_dims(const std::string& s) {
    std::vector<int64_t> dims;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) dims.push_back(std::stoll(part));
    return dims;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(part);
    return out;
}

int cmd_train(const std::string& config_path, int64_t seed_override, std::string out_dir) {
    auto cfg = parse_config_file(config_path);
    if (seed_override >= 0) cfg.training.seed = static_cast<uint64_t>(seed_override);
    if (out_dir.empty()) out_dir = "runs/" + to_string(cfg.architecture);

    auto train_ds = harness::load_split(cfg, "train");
    auto val_ds = harness::load_split(cfg, "val");
    std::cout << "training " << to_string(cfg.architecture) << " ("
              << codec::to_string(cfg.encoder.backbone) << ") on " << train_ds.size()
              << " samples, validating on " << val_ds.size() << "\n";

    auto model = harness::build_model(cfg);
    auto res = harness::train(*model, train_ds, val_ds, out_dir);
    std::cout << "best val loss " << res.best_val << " at epoch " << res.best_epoch << "\n"
              << "checkpoint: " << res.checkpoint << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& split, const std::string& data_root) {
    auto model = harness::load_checkpoint(ckpt);
    auto cfg = model->config();
    if (!data_root.empty()) cfg.data.root = data_root;
    auto ds = harness::load_split(cfg, split);
    auto rep = harness::evaluate(*model, ds);
    std::cout << rep.to_table();
    return 0;
}

int cmd_sample(const std::string& ckpt, int64_t n, int64_t ensemble,
               const std::string& condition_path, const std::string& out_dir, int64_t steps,
               double eta, int64_t seed) {
    auto model = harness::load_checkpoint(ckpt);
    auto cfg = model->config();
    if (steps > 0) cfg.diffusion.sample_steps = steps;
    if (eta >= 0) cfg.diffusion.eta = eta;

    torch::Tensor cond;
    if (!condition_path.empty())
        cond = io::read_image(condition_path, false).unsqueeze(0).unsqueeze(0);

    auto imgs = model->generate(n, cond, ensemble, cfg.diffusion.sample_steps, cfg.diffusion.eta,
                                make_generator(static_cast<uint64_t>(seed)));
    fs::create_directories(out_dir);
    const std::string ext = cfg.encoder.rank == 2 ? ".png" : ".nii";
    for (int64_t i = 0; i < imgs.size(0); ++i) {
        auto img = imgs[i][0].clamp(0, 1);
        io::write_image((fs::path(out_dir) / ("sample_" + std::to_string(i) + ext)).string(), img,
                        false);
    }
    std::cout << "wrote " << imgs.size(0) << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_profile(const std::string& blocks, const std::string& layers, const std::string& patch,
                int64_t iters, int64_t batch, const std::string& out) {
    std::vector<int64_t> layer_counts;
    for (const auto& l : split_csv(layers)) layer_counts.push_back(std::stoll(l));
    std::vector<std::vector<int64_t>> patches;
    for (const auto& p : split_csv(patch)) patches.push_back(parse_dims(p));

    auto rep = harness::profile(split_csv(blocks), layer_counts, patches, iters, batch);
    std::cout << rep.to_table();
    if (!out.empty()) {
        std::ofstream f(out);
        f << rep.to_table();
        std::cout << "report written to " << out << "\n";
    }
    return 0;
}

int cmd_synth(const std::string& task, int64_t n, const std::string& out_dir,
              const std::string& dims, int64_t seed) {
    if (task != "shapes") throw ConfigError("unknown synthetic task: " + task);
    data::SynthOpts o;
    o.n = n;
    o.dims = parse_dims(dims);
    o.seed = static_cast<uint64_t>(seed);
    auto m = data::synth_shapes_dataset(o, out_dir);
    std::cout << "wrote " << m.samples.size() << " image/mask pairs under " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modim: modular 2D/3D imaging models (segmentation, reconstruction, generation)"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt, split = "test", data_root, condition_path;
    std::string blocks = "conv,swin,mamba", layers = "8,16,32", patch = "64x64", synth_task = "shapes";
    std::string synth_dims = "64x64", profile_out;
    int64_t seed = -1, n = 1, ensemble = 1, iters = 20, batch = 2, steps = -1, synth_seed = 7;
    double eta = -1;

    auto* tr = app.add_subcommand("train", "train a model from a config file");
    tr->add_option("--config", config_path, "config path")->required();
    tr->add_option("--seed", seed, "override training.seed");
    tr->add_option("--out", out_dir, "output directory");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    ev->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    ev->add_option("--split", split, "train | val | test");
    ev->add_option("--data", data_root, "override dataset root");

    auto* sa = app.add_subcommand("sample", "draw samples from a ddpm checkpoint");
    sa->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    sa->add_option("--n", n, "number of samples");
    sa->add_option("--ensemble", ensemble, "ensemble size per output");
    sa->add_option("--condition", condition_path, "condition image path");
    sa->add_option("--out", out_dir, "output directory")->default_val("samples");
    sa->add_option("--steps", steps, "ddim steps");
    sa->add_option("--eta", eta, "ddim eta");
    sa->add_option("--seed", synth_seed, "sampling seed");

    auto* pr = app.add_subcommand("profile", "parameter/memory/time profile of building blocks");
    pr->add_option("--blocks", blocks, "comma list: conv,res_conv,vit,swin,mamba,conv_msa");
    pr->add_option("--layers", layers, "comma list of layer counts");
    pr->add_option("--patch", patch, "comma list of input sizes, e.g. 64x64,32x32x32");
    pr->add_option("--iters", iters, "iterations per measurement");
    pr->add_option("--batch", batch, "batch size");
    pr->add_option("--out", profile_out, "write the report to this path");

    auto* sy = app.add_subcommand("synth", "generate a synthetic dataset");
    sy->add_option("--task", synth_task, "shapes");
    sy->add_option("--n", n, "number of samples");
    sy->add_option("--out", out_dir, "output directory")->required();
    sy->add_option("--dims", synth_dims, "sample dims, e.g. 64x64 or 32x32x32");
    sy->add_option("--seed", synth_seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (tr->parsed()) return cmd_train(config_path, seed, out_dir);
        if (ev->parsed()) return cmd_eval(ckpt, split, data_root);
        if (sa->parsed()) return cmd_sample(ckpt, n, ensemble, condition_path, out_dir, steps, eta, synth_seed);
        if (pr->parsed()) return cmd_profile(blocks, layers, patch, iters, batch, profile_out);
        if (sy->parsed()) return cmd_synth(synth_task, n, out_dir, synth_dims, synth_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
