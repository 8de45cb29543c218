#include "modim/harness.hpp"

#include <torch/serialize.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "modim/losses.hpp"

namespace fs = std::filesystem;

namespace modim::harness {

arch::ModelPtr build_model(const ModelConfig& cfg) {
    torch::manual_seed(cfg.training.seed);
    return std::make_shared<arch::Model>(cfg);
}

double lr_at(const TrainOpts& t, int64_t epoch) {
    if (t.lr_schedule == "constant") return t.lr;
    const int64_t last = std::max<int64_t>(1, t.epochs - 1);
    return t.lr * (1.0 - static_cast<double>(std::min(epoch, last)) / static_cast<double>(last));
}

int64_t count_parameters(const torch::nn::Module& m) {
    int64_t n = 0;
    for (const auto& p : m.parameters()) n += p.numel();
    return n;
}

std::vector<std::string> zero_grad_parameters(const torch::nn::Module& m) {
    std::vector<std::string> out;
    for (const auto& p : m.named_parameters()) {
        const auto& g = p.value().grad();
        if (!g.defined() || g.abs().max().item<double>() == 0.0) out.push_back(p.key());
    }
    return out;
}

namespace {

struct TaskBatch {
    torch::Tensor x, target, cond, labels;
};

TaskBatch split_batch(const ModelConfig& cfg, const data::Batch& b) {
    TaskBatch t;
    const auto task = task_of(cfg.architecture);
    if (task == "segmentation") {
        t.x = b.image;
        t.target = b.label;
    } else if (task == "reconstruction") {
        t.x = b.input.defined() ? b.input : b.image;
        t.target = b.image;
    } else {  // generation: the model learns the clean image distribution
        t.x = b.image;
    }
    if (cfg.context.condition == "image") {
        if (!b.input.defined())
            throw ConfigError("condition == image requires datasets with per-sample inputs");
        t.cond = b.input;
    }
    return t;
}

void set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

}  // namespace

MetricReport evaluate(arch::Model& model, const data::Dataset& ds) {
    const auto& cfg = model.config();
    const auto task = task_of(cfg.architecture);
    torch::NoGradGuard ng;

    MetricReport rep;
    std::map<std::string, double> acc;
    data::Loader loader(ds, cfg.training.batch_size, cfg.training.seed, 0);
    loader.start_epoch(0, false);
    int64_t n = 0;

    while (auto ob = loader.next()) {
        auto tb = split_batch(cfg, *ob);
        const int64_t bsz = tb.x.size(0);
        if (task == "segmentation") {
            auto logits = model.forward(tb.x, RunCtx::eval(), tb.cond);
            auto pred = logits.argmax(1);
            for (int64_t i = 0; i < bsz; ++i) {
                acc["dice"] += metrics::dice_score(pred[i], tb.target[i], logits.size(1));
                acc["miou"] += metrics::miou(pred[i], tb.target[i], logits.size(1));
            }
            acc["loss"] += arch::sem_loss(logits, tb.target, cfg.loss.ce_weight, cfg.loss.dice_weight)
                               .item<double>() * bsz;
        } else if (task == "reconstruction") {
            auto pred = model.forward(tb.x, RunCtx::eval(), tb.cond);
            for (int64_t i = 0; i < bsz; ++i) {
                acc["psnr"] += metrics::psnr(pred[i], tb.target[i]);
                acc["ssim"] += metrics::ssim(pred[i], tb.target[i]);
            }
            acc["mse"] += losses::mse_loss(pred, tb.target).item<double>() * bsz;
        } else {
            // fixed-seed noise-prediction error; conditional reconstruction when inputs exist
            auto gen = make_generator(cfg.training.seed + 1);
            auto t = torch::randint(0, model.schedule().steps(), {bsz}, gen, torch::kLong);
            auto eps = torch::randn(tb.x.sizes(), gen, tb.x.options());
            auto x_t = arch::ddpm_forward_noising(tb.x, t, eps, model.schedule());
            auto pred = model.forward(x_t, RunCtx::eval(), tb.cond, t);
            acc["eps_mse"] += losses::mse_loss(pred, eps).item<double>() * bsz;
            if (tb.cond.defined()) {
                auto img = model.generate(bsz, tb.cond, cfg.diffusion.ensemble,
                                          cfg.diffusion.sample_steps, cfg.diffusion.eta,
                                          make_generator(cfg.training.seed + 2));
                for (int64_t i = 0; i < bsz; ++i) {
                    acc["psnr"] += metrics::psnr(img[i], tb.x[i]);
                    acc["ssim"] += metrics::ssim(img[i], tb.x[i]);
                }
            }
        }
        n += bsz;
    }
    TORCH_CHECK(n > 0, "evaluate needs a non-empty split");
    for (auto& [k, v] : acc) rep.values[k] = v / static_cast<double>(n);
    rep.count = n;
    return rep;
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    os << "metric\tvalue\n";
    for (const auto& [k, v] : values) os << k << "\t" << v << "\n";
    os << "samples\t" << count << "\n";
    return os.str();
}

TrainResult train(arch::Model& model, const data::Dataset& train_ds, const data::Dataset& val_ds,
                  const std::string& out_dir) {
    const auto& cfg = model.config();
    fs::create_directories(out_dir);
    {
        std::ofstream cf(fs::path(out_dir) / "config.json");
        cf << emit_config(cfg) << "\n";
    }

    auto gen = make_generator(cfg.training.seed * 0x9e3779b9ULL + 1);
    torch::optim::Adam opt(model.parameters(), torch::optim::AdamOptions(cfg.training.lr));
    data::Loader loader(train_ds, cfg.training.batch_size, cfg.training.seed,
                        cfg.training.num_workers);

    TrainResult res;
    res.best_val = std::numeric_limits<double>::infinity();
    std::ofstream csv(fs::path(out_dir) / "metrics.csv");
    csv << "epoch,lr,train_loss,val_loss,metrics\n";

    for (int64_t epoch = 0; epoch < cfg.training.epochs; ++epoch) {
        const double lr = lr_at(cfg.training, epoch);
        set_lr(opt, lr);
        loader.start_epoch(epoch, true);

        model.train();
        double train_loss = 0;
        int64_t seen = 0, batch_idx = 0;
        while (auto ob = loader.next()) {
            auto tb = split_batch(cfg, *ob);
            opt.zero_grad();
            auto loss = model.training_loss(tb.x, tb.target, tb.cond, tb.labels,
                                            RunCtx::train(gen));
            const double lv = loss.item<double>();
            if (!std::isfinite(lv)) {
                std::string ids;
                for (const auto& id : ob->ids) ids += id + " ";
                throw std::runtime_error("non-finite training loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_idx) + " (ids: " + ids + ")");
            }
            loss.backward();
            opt.step();
            train_loss += lv * tb.x.size(0);
            seen += tb.x.size(0);
            ++batch_idx;
        }
        model.eval();

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        log.train_loss = seen ? train_loss / static_cast<double>(seen) : 0.0;

        if (val_ds.size() > 0) {
            auto rep = evaluate(model, val_ds);
            log.metrics = rep.values;
            log.val_loss = rep.values.count("loss") ? rep.values.at("loss")
                          : rep.values.count("mse") ? rep.values.at("mse")
                          : rep.values.count("eps_mse") ? rep.values.at("eps_mse")
                                                        : log.train_loss;
        } else {
            log.val_loss = log.train_loss;
        }

        csv << log.epoch << "," << log.lr << "," << log.train_loss << "," << log.val_loss << ",";
        for (const auto& [k, v] : log.metrics) csv << k << "=" << v << ";";
        csv << "\n";
        csv.flush();
        res.log.push_back(log);

        if (log.val_loss < res.best_val) {
            res.best_val = log.val_loss;
            res.best_epoch = epoch;
            res.checkpoint = (fs::path(out_dir) / "best.ckpt").string();
            save_checkpoint(model, res.checkpoint);
        }
    }
    save_checkpoint(model, (fs::path(out_dir) / "last.ckpt").string());
    if (res.checkpoint.empty()) res.checkpoint = (fs::path(out_dir) / "last.ckpt").string();
    return res;
}

torch::Tensor sample(arch::Model& model, int64_t n, const torch::Tensor& condition,
                     int64_t k_ensemble, at::Generator gen) {
    const auto& d = model.config().diffusion;
    return model.generate(n, condition, k_ensemble, d.sample_steps, d.eta, std::move(gen));
}

void save_checkpoint(arch::Model& model, const std::string& path) {
    torch::serialize::OutputArchive ar;
    ar.write("format", std::string("modim.checkpoint.v1"));
    ar.write("config", emit_config(model.config()));
    for (const auto& p : model.named_parameters()) ar.write("param/" + p.key(), p.value());
    for (const auto& b : model.named_buffers()) ar.write("buffer/" + b.key(), b.value());
    ar.save_to(path);
}

arch::ModelPtr load_checkpoint(const std::string& path) {
    torch::serialize::InputArchive ar;
    ar.load_from(path);
    c10::IValue format, config;
    ar.read("format", format);
    if (format.toStringRef() != "modim.checkpoint.v1")
        throw ConfigError("unrecognized checkpoint format: " + format.toStringRef());
    ar.read("config", config);
    auto model = build_model(parse_config(config.toStringRef()));
    torch::NoGradGuard ng;
    for (const auto& p : model->named_parameters()) {
        torch::Tensor t;
        ar.read("param/" + p.key(), t);
        p.value().copy_(t);
    }
    for (const auto& b : model->named_buffers()) {
        torch::Tensor t;
        ar.read("buffer/" + b.key(), t);
        b.value().copy_(t);
    }
    model->eval();
    return model;
}

data::Dataset load_split(const ModelConfig& cfg, const std::string& which) {
    if (cfg.data.root.empty()) throw ConfigError("config has no data.root");
    auto manifest = data::DatasetManifest::load((fs::path(cfg.data.root) / "manifest.json").string());
    auto split = data::kfold_split(manifest.ids(), cfg.training.seed);
    return data::Dataset(manifest, split.subset(which));
}

}  // namespace modim::harness
