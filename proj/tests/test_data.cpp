#include <doctest.h>
#include <torch/torch.h>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <set>

#include "modim/data.hpp"
#include "modim/image_io.hpp"

namespace fs = std::filesystem;
using namespace modim;
using namespace modim::data;

namespace {

std::vector<std::string> make_ids(int64_t n) {
    std::vector<std::string> ids;
    for (int64_t i = 0; i < n; ++i) ids.push_back("s" + std::to_string(i));
    return ids;
}

std::string tmp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("modim_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

}  // namespace

TEST_CASE("kfold split: sizes, determinism, remainder distribution") {
    auto s10 = kfold_split(make_ids(10), 3);
    std::map<int, int> sizes;
    for (int f : s10.fold) sizes[f]++;
    for (int f = 1; f <= 5; ++f) CHECK(sizes[f] == 2);
    CHECK(s10.subset("train").size() == 6);
    CHECK(s10.subset("val").size() == 2);
    CHECK(s10.subset("test").size() == 2);

    auto again = kfold_split(make_ids(10), 3);
    CHECK(s10.ids == again.ids);
    CHECK(s10.fold == again.fold);

    auto s7 = kfold_split(make_ids(7), 3);
    std::vector<int> c(6, 0);
    for (int f : s7.fold) c[static_cast<size_t>(f)]++;
    std::vector<int> got(c.begin() + 1, c.end());
    std::sort(got.begin(), got.end(), std::greater<>());
    CHECK(got == std::vector<int>{2, 2, 1, 1, 1});

    // folds partition the ids
    std::set<std::string> all;
    for (const auto& which : {"train", "val", "test"})
        for (const auto& id : s7.subset(which)) CHECK(all.insert(id).second);
    CHECK(all.size() == 7);
}

TEST_CASE("preprocess: crops, normalization, label integrity") {
    // already at target dims: values unchanged by min-max when range is [0, 1]
    auto img = torch::rand({16, 16});
    img[0][0] = 0.0;
    img[1][1] = 1.0;
    PreprocessOpts o;
    o.target_dims = {16, 16};
    CHECK(torch::allclose(preprocess(img, o), img));

    // 400x400 center crop 320 keeps the central window
    auto big = torch::arange(400 * 400, torch::kFloat).reshape({400, 400});
    PreprocessOpts oc;
    oc.center_crop = {320, 320};
    auto cropped = preprocess(big, oc);
    CHECK(cropped.sizes() == torch::IntArrayRef({320, 320}));
    // (40, 40) maps to the cropped origin; compare pre-normalization structure
    auto manual = big.narrow(0, 40, 320).narrow(1, 40, 320);
    auto norm = (manual - manual.min()) / (manual.max() - manual.min());
    CHECK(torch::allclose(cropped, norm));

    // zero border is removed exactly by the nonzero crop
    auto vol = torch::zeros({8, 8, 8});
    vol.narrow(0, 2, 3).narrow(1, 1, 4).narrow(2, 3, 2).fill_(2.0);
    PreprocessOpts on;
    on.nonzero_crop = true;
    CHECK(preprocess(vol, on).sizes() == torch::IntArrayRef({3, 4, 2}));

    // labels resize by nearest and stay integer-valued
    auto labels = torch::randint(0, 3, {10, 10}, torch::kLong);
    PreprocessOpts ol;
    ol.target_dims = {5, 5};
    ol.is_label = true;
    auto lr = preprocess(labels, ol);
    CHECK(lr.dtype() == torch::kLong);
    CHECK((lr < 3).all().item<bool>());

    // outputs always live in [0, 1]
    auto wild = torch::randn({12, 12}) * 40 - 7;
    PreprocessOpts ow;
    auto w = preprocess(wild, ow);
    CHECK(w.min().item<double>() >= 0.0);
    CHECK(w.max().item<double>() <= 1.0);
}

TEST_CASE("kspace undersampling: round trip, masking, energy") {
    torch::manual_seed(200);
    auto img = torch::rand({32, 32});
    Rng rng(5);

    auto [full, mask_full] = kspace_undersample(img, 1.0, rng);
    CHECK((full - img).abs().max().item<double>() < 1e-5);  // transform round trip
    CHECK(mask_full.mean().item<double>() == doctest::Approx(1.0));

    Rng rng2(6);
    auto [recon, mask] = kspace_undersample(img, 0.25, rng2);
    CHECK(recon.sizes() == img.sizes());
    // binary, line-structured mask: constant along the readout axis
    CHECK(((mask == 0) | (mask == 1)).all().item<bool>());
    CHECK((mask.amax(1) - mask.amin(1)).abs().max().item<double>() == 0.0);
    CHECK(mask.mean().item<double>() == doctest::Approx(0.25).epsilon(0.05));

    // center band is always kept
    CHECK(mask[16][0].item<float>() == 1.0f);

    // Parseval: masked spectral energy never exceeds the full energy
    auto k = torch::fft::fftshift(torch::fft::fft2(img.to(torch::kComplexDouble)));
    const double full_energy = (k.abs().pow(2)).sum().item<double>();
    const double masked_energy = (k.abs().pow(2) * mask.to(torch::kDouble)).sum().item<double>();
    CHECK(masked_energy <= full_energy + 1e-9);

    // an all-masked spectrum reconstructs to the zero image
    auto zeroed = torch::fft::ifft2(k * 0.0).abs();
    CHECK(zeroed.abs().max().item<double>() == 0.0);

    CHECK_THROWS_AS(kspace_undersample(img, 0.0, rng), ConfigError);
    CHECK_THROWS_AS(kspace_undersample(img, 1.5, rng), ConfigError);
}

TEST_CASE("slice_volume: counts and reassembly") {
    auto vol = torch::randn({40, 8, 8});
    auto slices = slice_volume(vol, 5);
    CHECK(slices.size() == 35);
    CHECK(slice_volume(vol, 0).size() == 40);

    auto rebuilt = torch::stack(std::vector<torch::Tensor>(slices.begin(), slices.end()), 0);
    CHECK(torch::equal(rebuilt, vol.narrow(0, 5, 35)));
}

TEST_CASE("synthetic shapes: determinism, mask validity, foreground band") {
    Rng a(42), b(42);
    auto [img1, mask1] = synth_shapes_sample({64, 64}, a);
    auto [img2, mask2] = synth_shapes_sample({64, 64}, b);
    CHECK(torch::equal(img1, img2));
    CHECK(torch::equal(mask1, mask2));

    Rng r3(43);
    auto [img3, mask3] = synth_shapes_sample({16, 16, 16}, r3);
    CHECK(img3.sizes() == torch::IntArrayRef({16, 16, 16}));
    CHECK(((mask3 == 0) | (mask3 == 1)).all().item<bool>());

    Rng root(7);
    for (int i = 0; i < 100; ++i) {
        auto rng = root.split(static_cast<uint64_t>(i));
        auto [img, mask] = synth_shapes_sample({32, 32}, rng);
        const double fg = mask.to(torch::kDouble).mean().item<double>();
        CHECK(fg >= 0.05);
        CHECK(fg <= 0.40);
        CHECK(img.min().item<double>() >= 0.0);
        CHECK(img.max().item<double>() <= 1.0);
    }
}

TEST_CASE("png and nifti round trips") {
    auto dir = tmp_dir("io");
    auto img = torch::rand({24, 20});
    io::write_png(dir + "/a.png", img);
    auto back = io::read_png(dir + "/a.png");
    CHECK((back - img).abs().max().item<double>() <= 1.0 / 65535.0 + 1e-7);

    auto labels = torch::randint(0, 4, {24, 20}, torch::kLong);
    io::write_png_labels(dir + "/l.png", labels);
    CHECK(torch::equal(io::read_png_labels(dir + "/l.png"), labels));

    auto vol = torch::randn({6, 5, 4});
    io::write_nifti(dir + "/v.nii", vol);
    CHECK(torch::equal(io::read_nifti(dir + "/v.nii"), vol));
}

TEST_CASE("synthetic dataset on disk: manifest, byte-identical regeneration") {
    auto d1 = tmp_dir("synth1");
    auto d2 = tmp_dir("synth2");
    SynthOpts o;
    o.n = 4;
    o.dims = {32, 32};
    o.seed = 99;
    auto m1 = synth_shapes_dataset(o, d1);
    auto m2 = synth_shapes_dataset(o, d2);
    CHECK(m1.samples.size() == 4);

    for (size_t i = 0; i < m1.samples.size(); ++i) {
        auto a = io::read_image(d1 + "/" + m1.samples[i].image, false);
        auto b = io::read_image(d2 + "/" + m2.samples[i].image, false);
        CHECK(torch::equal(a, b));
    }

    auto loaded = DatasetManifest::load(d1 + "/manifest.json");
    CHECK(loaded.samples.size() == 4);
    CHECK(loaded.rank == 2);

    Dataset ds(loaded);
    CHECK(ds.size() == 4);
    CHECK(ds.get(0).image.sizes() == torch::IntArrayRef({1, 32, 32}));
    CHECK(ds.get(0).label.dtype() == torch::kLong);

    // duplicate ids are rejected
    auto dup = loaded;
    dup.samples.push_back(dup.samples[0]);
    CHECK_THROWS_AS(dup.validate(), ConfigError);
}

TEST_CASE("loader: pure shuffle function, worker/sync equivalence") {
    auto p1 = epoch_batches(10, 3, 4, 77, true);
    auto p2 = epoch_batches(10, 3, 4, 77, true);
    CHECK(p1 == p2);
    CHECK(p1.size() == 4);
    auto p3 = epoch_batches(10, 3, 5, 77, true);
    CHECK(p1 != p3);  // epochs reshuffle

    auto dir = tmp_dir("loader");
    SynthOpts o;
    o.n = 6;
    o.dims = {16, 16};
    auto m = synth_shapes_dataset(o, dir);
    Dataset ds(m);

    Loader sync(ds, 2, 11, 0);
    Loader async(ds, 2, 11, 1);
    sync.start_epoch(2, true);
    async.start_epoch(2, true);
    while (true) {
        auto a = sync.next();
        auto b = async.next();
        CHECK(a.has_value() == b.has_value());
        if (!a) break;
        CHECK(a->ids == b->ids);
        CHECK(torch::equal(a->image, b->image));
    }
}
