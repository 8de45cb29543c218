#include <doctest.h>
#include <torch/torch.h>

#include <cstring>
#include <filesystem>

#include "modim/harness.hpp"

namespace fs = std::filesystem;
using namespace modim;

namespace {

std::string tmp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("modim_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string minimal_sem_config(const std::string& data_root, int64_t epochs = 2) {
    return std::string(R"({
      "architecture": "sem",
      "encoder": {"backbone": "conv", "rank": 2, "u_shaped": true, "base_channels": 8,
                   "input_size": [16, 16], "num_middle": 1},
      "training": {"epochs": )") +
           std::to_string(epochs) + R"(, "batch_size": 4, "lr": 0.001, "seed": 9},
      "data": {"root": ")" + data_root + R"("}
    })";
}

data::Dataset synthetic_ds(int64_t n, std::vector<int64_t> dims, uint64_t seed) {
    data::Dataset ds;
    Rng root(seed);
    for (int64_t i = 0; i < n; ++i) {
        auto rng = root.split(static_cast<uint64_t>(i));
        auto [img, mask] = data::synth_shapes_sample(dims, rng);
        data::Item it;
        it.id = "s" + std::to_string(i);
        it.image = img.unsqueeze(0);
        it.label = mask;
        ds.add(std::move(it));
    }
    return ds;
}

}  // namespace

TEST_CASE("config parsing: defaults, rejections, round trip") {
    auto cfg = parse_config(R"({"architecture": "sem",
                                "encoder": {"backbone": "conv", "rank": 2}})");
    CHECK(cfg.architecture == ArchKind::Sem);
    CHECK(cfg.encoder.downs() == 2);           // 2D default
    CHECK(cfg.encoder.num_middle == 2);        // default middle layers
    CHECK(cfg.encoder.patch() == 1);           // conv backbone default
    CHECK(cfg.training.lr == doctest::Approx(3e-4));
    CHECK(cfg.training.epochs == 500);
    CHECK(cfg.resolved_out_channels() == 2);

    auto cfg3 = parse_config(R"({"architecture": "ae",
                                 "encoder": {"backbone": "swin", "rank": 3,
                                              "input_size": [16, 16, 16]}})");
    CHECK(cfg3.encoder.downs() == 3);  // 3D default
    CHECK(cfg3.encoder.patch() == 2);  // sequence 3D default

    // the hierarchical ddpm combination is rejected with a diagnostic
    CHECK_THROWS_WITH_AS(parse_config(R"({"architecture": "ddpm", "hierarchical": true})"),
                         doctest::Contains("hierarchical feature fusion is not supported for ddpm"),
                         ConfigError);

    CHECK_THROWS_WITH_AS(parse_config(R"({"architecture": "sem", "bogus_key": 1})"),
                         doctest::Contains("unknown config key"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"architecture": "vae",
                                     "encoder": {"backbone": "conv", "rank": 2, "u_shaped": true}})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("not json"), ConfigError);

    // round trip: emitted configs parse back to the same emitted form
    auto emitted = emit_config(cfg);
    CHECK(emit_config(parse_config(emitted)) == emitted);
}

TEST_CASE("hierarchical shorthand maps onto h_sem / h_ae") {
    auto h = parse_config(R"({"architecture": "sem", "hierarchical": true})");
    CHECK(h.architecture == ArchKind::HSem);
    auto ha = parse_config(R"({"architecture": "ae", "hierarchical": true})");
    CHECK(ha.architecture == ArchKind::HAe);
}

TEST_CASE("learning rate schedule: 3e-4 at epoch 0, 0 at the final epoch") {
    TrainOpts t;
    t.lr = 3e-4;
    t.epochs = 500;
    CHECK(harness::lr_at(t, 0) == doctest::Approx(3e-4));
    CHECK(harness::lr_at(t, 499) == doctest::Approx(0.0));
    CHECK(harness::lr_at(t, 250) > 0.0);
    t.lr_schedule = "constant";
    CHECK(harness::lr_at(t, 499) == doctest::Approx(3e-4));
}

TEST_CASE("parameter counting: affine map and 3x3 conv") {
    auto lin = torch::nn::Linear(4, 2);
    CHECK(harness::count_parameters(*lin) == 10);
    auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(8, 16, 3));
    CHECK(harness::count_parameters(*conv) == 1168);  // 16*8*9 + 16
}

TEST_CASE("parameter count doubles (within 20%) from depth 16 to depth 32") {
    const auto c16 = harness::count_parameters(
        *harness::build_model(harness::profile_config("conv", 16, {64, 64})));
    const auto c32 = harness::count_parameters(
        *harness::build_model(harness::profile_config("conv", 32, {64, 64})));
    const double ratio = static_cast<double>(c32) / static_cast<double>(c16);
    CHECK(ratio > 1.6);
    CHECK(ratio < 2.4);
}

TEST_CASE("one-epoch training run completes and writes artifacts") {
    auto data_dir = tmp_dir("run_data");
    data::SynthOpts so;
    so.n = 8;
    so.dims = {16, 16};
    auto manifest = data::synth_shapes_dataset(so, data_dir);

    auto cfg = parse_config(minimal_sem_config(data_dir, 1));
    auto train_ds = data::Dataset(manifest);
    auto model = harness::build_model(cfg);
    auto out = tmp_dir("run_out");
    auto res = harness::train(*model, train_ds, train_ds, out);
    CHECK(res.log.size() == 1);
    CHECK(fs::exists(res.checkpoint));
    CHECK(fs::exists(fs::path(out) / "metrics.csv"));
    CHECK(fs::exists(fs::path(out) / "config.json"));
}

TEST_CASE("loss decreases over the first 10 steps for most seeds") {
    int ok = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        auto ds = synthetic_ds(8, {16, 16}, seed);
        ModelConfig cfg = parse_config(minimal_sem_config("", 1));
        cfg.training.seed = seed;
        cfg.training.lr = 1e-3;
        auto model = harness::build_model(cfg);
        auto batch = ds.collate({0, 1, 2, 3, 4, 5, 6, 7});
        torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(1e-3));
        auto gen = make_generator(seed);
        double first = 0, last = 0;
        for (int step = 0; step < 10; ++step) {
            opt.zero_grad();
            auto loss = model->training_loss(batch.image, batch.label, {}, {}, RunCtx::train(gen));
            loss.backward();
            opt.step();
            if (step == 0) first = loss.item<double>();
            last = loss.item<double>();
        }
        if (last < first) ++ok;
    }
    CHECK(ok >= 4);
}

TEST_CASE("checkpoint round trip reproduces metrics bit-identically") {
    auto ds = synthetic_ds(6, {16, 16}, 21);
    auto cfg = parse_config(minimal_sem_config("", 2));
    auto model = harness::build_model(cfg);
    auto out = tmp_dir("ckpt");
    harness::train(*model, ds, ds, out);

    auto before = harness::evaluate(*model, ds);
    auto path = out + "/roundtrip.ckpt";
    harness::save_checkpoint(*model, path);
    auto loaded = harness::load_checkpoint(path);
    auto after = harness::evaluate(*loaded, ds);

    REQUIRE(before.values.size() == after.values.size());
    for (const auto& [k, v] : before.values) {
        INFO(k);
        CHECK(std::memcmp(&v, &after.values.at(k), sizeof(double)) == 0);
    }
}

TEST_CASE("two runs from the same emitted config produce identical logs") {
    auto ds = synthetic_ds(6, {16, 16}, 31);
    auto text = minimal_sem_config("", 2);
    auto emitted = emit_config(parse_config(text));

    std::vector<std::vector<double>> losses;
    for (int run = 0; run < 2; ++run) {
        auto cfg = parse_config(emitted);
        auto model = harness::build_model(cfg);
        auto res = harness::train(*model, ds, ds, tmp_dir("det" + std::to_string(run)));
        std::vector<double> l;
        for (const auto& e : res.log) {
            l.push_back(e.train_loss);
            l.push_back(e.val_loss);
        }
        losses.push_back(l);
    }
    CHECK(losses[0] == losses[1]);
}

TEST_CASE("evaluation on a memorized single sample reaches Dice ~ 1") {
    auto ds = synthetic_ds(1, {32, 32}, 55);
    ModelConfig cfg = parse_config(minimal_sem_config("", 1));
    cfg.encoder.input_size = {32, 32};
    cfg.training.lr = 3e-3;
    cfg.training.lr_schedule = "constant";
    auto model = harness::build_model(cfg);
    auto batch = ds.collate({0});
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.training.lr));
    auto gen = make_generator(1);
    for (int step = 0; step < 120; ++step) {
        opt.zero_grad();
        auto loss = model->training_loss(batch.image, batch.label, {}, {}, RunCtx::train(gen));
        loss.backward();
        opt.step();
    }
    model->eval();
    auto rep = harness::evaluate(*model, ds);
    CHECK(rep.values.at("dice") >= 0.997);
}

TEST_CASE("profiler: params scale linearly with layer count per block kind") {
    for (const auto& kind : {"conv", "swin", "mamba"}) {
        std::vector<double> xs, ys;
        for (int64_t layers : {8, 16, 32}) {
            auto cfg = harness::profile_config(kind, layers, {32, 32});
            xs.push_back(static_cast<double>(layers));
            ys.push_back(static_cast<double>(
                harness::count_parameters(*harness::build_model(cfg))));
        }
        // least-squares R^2
        double mx = (xs[0] + xs[1] + xs[2]) / 3, my = (ys[0] + ys[1] + ys[2]) / 3;
        double sxy = 0, sxx = 0, syy = 0;
        for (int i = 0; i < 3; ++i) {
            sxy += (xs[i] - mx) * (ys[i] - my);
            sxx += (xs[i] - mx) * (xs[i] - mx);
            syy += (ys[i] - my) * (ys[i] - my);
        }
        const double r2 = sxy * sxy / (sxx * syy);
        INFO(kind);
        CHECK(r2 > 0.99);
    }
}

TEST_CASE("profiler report: rows, failure capture, table form") {
    auto rep = harness::profile({"conv"}, {6}, {{16, 16}}, 2, 2);
    REQUIRE(rep.rows.size() == 1);
    CHECK_FALSE(rep.rows[0].failed);
    CHECK(rep.rows[0].params > 0);
    CHECK(rep.rows[0].train_time_s > 0);
    CHECK(rep.rows[0].infer_time_s > 0);
    auto table = rep.to_table();
    CHECK(table.find("params_m") != std::string::npos);
    CHECK(table.find("training_time_s") != std::string::npos);

    // an impossible row is recorded as failed without aborting the run
    auto bad = harness::profile({"conv"}, {4}, {{2, 2}}, 1, 1);
    REQUIRE(bad.rows.size() == 1);
    CHECK(bad.rows[0].failed);
}

TEST_CASE("evaluate is deterministic given checkpoint and split") {
    auto ds = synthetic_ds(5, {16, 16}, 77);
    auto cfg = parse_config(minimal_sem_config("", 1));
    auto model = harness::build_model(cfg);
    auto a = harness::evaluate(*model, ds);
    auto b = harness::evaluate(*model, ds);
    CHECK(a.values == b.values);
}

TEST_CASE("load_split wires manifest + folds") {
    auto dir = tmp_dir("split");
    data::SynthOpts so;
    so.n = 10;
    so.dims = {16, 16};
    data::synth_shapes_dataset(so, dir);
    auto cfg = parse_config(minimal_sem_config(dir, 1));
    CHECK(harness::load_split(cfg, "train").size() == 6);
    CHECK(harness::load_split(cfg, "val").size() == 2);
    CHECK(harness::load_split(cfg, "test").size() == 2);
}
