#include <chrono>
#include <fstream>
#include <sstream>

#include "modim/harness.hpp"

namespace modim::harness {

namespace {

// Peak-RSS accounting: the counter is reset per row where the kernel allows it.
bool reset_peak_rss() {
    std::ofstream f("/proc/self/clear_refs");
    if (!f) return false;
    f << "5";
    return static_cast<bool>(f);
}

double peak_rss_gb() {
    std::ifstream f("/proc/self/status");
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream is(line.substr(6));
            double kb = 0;
            is >> kb;
            return kb / (1024.0 * 1024.0);
        }
    }
    return -1;
}

std::string dims_str(const std::vector<int64_t>& d) {
    std::string s;
    for (size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
    return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ModelConfig profile_config(const std::string& block_kind, int64_t layers,
                           const std::vector<int64_t>& patch_dims) {
    ModelConfig cfg;
    cfg.architecture = ArchKind::Sem;
    cfg.out_channels = 2;
    cfg.encoder.backbone = codec::backbone_from_string(block_kind);
    cfg.encoder.rank = static_cast<int64_t>(patch_dims.size());
    cfg.encoder.input_size = patch_dims;
    cfg.encoder.in_channels = 1;
    cfg.encoder.base_channels = 32;
    cfg.encoder.num_down = 2;  // two down-sampling and two up-sampling layers
    cfg.encoder.blocks_per_stage = 1;
    cfg.encoder.final_layers = 1;
    // remaining building blocks become middle layers, so the total block count
    // tracks the requested layer count
    const int64_t fixed = 2 * cfg.encoder.blocks_per_stage * 2 + cfg.encoder.final_layers;
    cfg.encoder.num_middle = std::max<int64_t>(0, layers - fixed);
    cfg.encoder.u_shaped = true;
    cfg.encoder.drop_path = 0.0;
    cfg.training.batch_size = 2;
    cfg.resolve();
    return cfg;
}

ProfileReport profile(const std::vector<std::string>& block_kinds,
                      const std::vector<int64_t>& layer_counts,
                      const std::vector<std::vector<int64_t>>& patch_dims, int64_t iters,
                      int64_t batch) {
    ProfileReport rep;
    rep.iters = iters;
    rep.batch = batch;
    rep.memory_source = reset_peak_rss() ? "peak_rss" : "unavailable";

    for (const auto& kind : block_kinds)
        for (int64_t layers : layer_counts)
            for (const auto& dims : patch_dims) {
                ProfileRow row;
                row.block = kind;
                row.layers = layers;
                row.patch_dims = dims;
                try {
                    auto cfg = profile_config(kind, layers, dims);
                    cfg.training.batch_size = batch;
                    auto model = build_model(cfg);
                    row.params = count_parameters(*model);

                    auto gen = make_generator(17);
                    std::vector<int64_t> shape{batch, 1};
                    shape.insert(shape.end(), dims.begin(), dims.end());
                    auto x = torch::randn(shape, gen);
                    std::vector<int64_t> tshape{batch};
                    tshape.insert(tshape.end(), dims.begin(), dims.end());
                    auto target = torch::randint(0, 2, tshape, gen, torch::kLong);

                    const bool mem = reset_peak_rss();
                    torch::optim::Adam opt(model->parameters(),
                                           torch::optim::AdamOptions(1e-4));
                    model->train();
                    {
                        // warmup: allocator and thread-pool spin-up stay out of the timing
                        opt.zero_grad();
                        auto loss = model->training_loss(x, target, {}, {}, RunCtx::train(gen));
                        loss.backward();
                        opt.step();
                        torch::NoGradGuard ng;
                        model->forward(x, RunCtx::eval());
                    }
                    auto t0 = std::chrono::steady_clock::now();
                    for (int64_t i = 0; i < iters; ++i) {
                        opt.zero_grad();
                        auto loss = model->training_loss(x, target, {}, {}, RunCtx::train(gen));
                        loss.backward();
                        opt.step();
                    }
                    row.train_time_s = seconds_since(t0);

                    model->eval();
                    t0 = std::chrono::steady_clock::now();
                    {
                        torch::NoGradGuard ng;
                        for (int64_t i = 0; i < iters; ++i) model->forward(x, RunCtx::eval());
                    }
                    row.infer_time_s = seconds_since(t0);
                    if (mem) row.memory_gb = peak_rss_gb();
                } catch (const std::exception& e) {
                    row.failed = true;
                    row.error = e.what();
                }
                rep.rows.push_back(std::move(row));
            }
    return rep;
}

std::string ProfileReport::to_table() const {
    std::ostringstream os;
    os << "# iters=" << iters << " batch=" << batch << " memory=" << memory_source << "\n";
    os << "block\tlayers\tpatch\tparams_m\tmemory_gb\ttraining_time_s\tinference_time_s\n";
    for (const auto& r : rows) {
        os << r.block << "\t" << r.layers << "\t" << dims_str(r.patch_dims) << "\t";
        if (r.failed) {
            os << "failed: " << r.error << "\n";
            continue;
        }
        os << static_cast<double>(r.params) / 1e6 << "\t";
        if (r.memory_gb >= 0) os << r.memory_gb;
        else os << "n/a";
        os << "\t" << r.train_time_s << "\t" << r.infer_time_s << "\n";
    }
    return os.str();
}

}  // namespace modim::harness
