#include "modim/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "modim/architectures.hpp"
#include "modim/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace modim::data {

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void DatasetManifest::validate() const {
    std::set<std::string> seen;
    bool first = true, with_label = false;
    for (const auto& s : samples) {
        if (!seen.insert(s.id).second) throw ConfigError("duplicate sample id: " + s.id);
        if (s.image.empty()) throw ConfigError("sample " + s.id + " has no image path");
        if (first) {
            with_label = !s.label.empty();
            first = false;
        } else if (with_label != !s.label.empty()) {
            throw ConfigError("label presence must be consistent across the manifest");
        }
    }
    if (rank != 2 && rank != 3) throw ConfigError("manifest rank must be 2 or 3");
}

std::vector<std::string> DatasetManifest::ids() const {
    std::vector<std::string> out;
    for (const auto& s : samples) out.push_back(s.id);
    return out;
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest: " + path);
    json j;
    in >> j;
    DatasetManifest m;
    m.rank = j.at("rank").get<int64_t>();
    m.task = j.at("task").get<std::string>();
    m.root = fs::path(path).parent_path().string();
    for (const auto& e : j.at("samples")) {
        Sample s;
        s.id = e.at("id").get<std::string>();
        s.image = e.at("image").get<std::string>();
        if (e.contains("label")) s.label = e.at("label").get<std::string>();
        if (e.contains("input")) s.input = e.at("input").get<std::string>();
        m.samples.push_back(std::move(s));
    }
    m.validate();
    return m;
}

void DatasetManifest::save(const std::string& path) const {
    validate();
    json j;
    j["rank"] = rank;
    j["task"] = task;
    j["samples"] = json::array();
    for (const auto& s : samples) {
        json e{{"id", s.id}, {"image", s.image}};
        if (!s.label.empty()) e["label"] = s.label;
        if (!s.input.empty()) e["input"] = s.input;
        j["samples"].push_back(e);
    }
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

FoldSplit kfold_split(std::vector<std::string> ids, uint64_t seed) {
    FoldSplit fsplit;
    fsplit.seed = seed;
    Rng rng(seed);
    rng.shuffle(ids);
    fsplit.ids = ids;
    fsplit.fold.resize(ids.size());
    const int64_t n = static_cast<int64_t>(ids.size());
    // round-robin over the shuffled order keeps fold sizes within one
    for (int64_t i = 0; i < n; ++i) fsplit.fold[static_cast<size_t>(i)] = static_cast<int>(i % 5) + 1;
    return fsplit;
}

std::vector<std::string> FoldSplit::subset(const std::string& which) const {
    std::vector<std::string> out;
    for (size_t i = 0; i < ids.size(); ++i) {
        const int f = fold[i];
        if ((which == "train" && f <= 3) || (which == "val" && f == 4) ||
            (which == "test" && f == 5))
            out.push_back(ids[i]);
    }
    if (which != "train" && which != "val" && which != "test")
        throw ConfigError("split must be train, val or test");
    return out;
}

void FoldSplit::save(const std::string& path) const {
    json j;
    j["seed"] = seed;
    j["folds"] = json::object();
    for (size_t i = 0; i < ids.size(); ++i) j["folds"][ids[i]] = fold[i];
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write split: " + path);
    out << j.dump(2) << "\n";
}

FoldSplit FoldSplit::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open split: " + path);
    json j;
    in >> j;
    FoldSplit s;
    s.seed = j.at("seed").get<uint64_t>();
    for (auto it = j.at("folds").begin(); it != j.at("folds").end(); ++it) {
        s.ids.push_back(it.key());
        s.fold.push_back(it.value().get<int>());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Preprocess
// ---------------------------------------------------------------------------

namespace {

torch::Tensor nonzero_bbox_crop(const torch::Tensor& x) {
    auto nz = x != 0;
    const int64_t rank = x.dim();
    auto out = x;
    for (int64_t a = 0; a < rank; ++a) {
        std::vector<int64_t> others;
        for (int64_t b = 0; b < rank; ++b)
            if (b != a) others.push_back(b);
        auto line = others.empty() ? nz : nz.amax(others);  // (dim_a,) bool
        auto idx = line.nonzero();
        if (idx.numel() == 0) return x;  // all zero: nothing to crop
        const int64_t lo = idx.min().item<int64_t>();
        const int64_t hi = idx.max().item<int64_t>();
        out = out.narrow(a, lo, hi - lo + 1);
        nz = nz.narrow(a, lo, hi - lo + 1);
    }
    return out;
}

torch::Tensor center_crop(const torch::Tensor& x, const std::vector<int64_t>& extent) {
    auto out = x;
    for (size_t i = 0; i < extent.size(); ++i) {
        const int64_t cur = out.size(static_cast<int64_t>(i));
        const int64_t want = std::min(extent[i], cur);
        out = out.narrow(static_cast<int64_t>(i), (cur - want) / 2, want);
    }
    return out;
}

}  // namespace

torch::Tensor preprocess(const torch::Tensor& image, const PreprocessOpts& o) {
    auto x = image;
    if (o.nonzero_crop) x = nonzero_bbox_crop(x);
    if (!o.center_crop.empty()) {
        TORCH_CHECK(static_cast<int64_t>(o.center_crop.size()) == x.dim(),
                    "center_crop must list one extent per dim");
        x = center_crop(x, o.center_crop);
    }
    if (!o.target_dims.empty()) {
        std::vector<int64_t> dims(x.sizes().begin(), x.sizes().end());
        if (dims != o.target_dims) {
            auto v = x.unsqueeze(0);  // (1, d..): scale_to adds the channel dim
            v = arch::scale_to(v, o.target_dims, o.is_label);
            x = v.squeeze(0);
        }
    }
    if (!o.is_label) {
        x = x.to(torch::kFloat);
        const auto lo = x.min();
        const auto hi = x.max();
        const double span = (hi - lo).item<double>();
        x = span > 0 ? (x - lo) / span : torch::zeros_like(x);
    }
    return x.contiguous();
}

// ---------------------------------------------------------------------------
// k-space undersampling
// ---------------------------------------------------------------------------

std::pair<torch::Tensor, torch::Tensor> kspace_undersample(const torch::Tensor& image,
                                                           double keep_fraction, Rng& rng,
                                                           double center_fraction) {
    TORCH_CHECK(image.dim() == 2, "kspace_undersample expects a 2D slice");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw ConfigError("keep_fraction must be in (0, 1]");

    const int64_t lines = image.size(0);
    auto k = torch::fft::fftshift(torch::fft::fft2(image.to(torch::kComplexDouble)));

    const int64_t keep = std::max<int64_t>(1, static_cast<int64_t>(std::llround(keep_fraction * lines)));
    int64_t band = std::max<int64_t>(1, static_cast<int64_t>(std::llround(center_fraction * lines)));
    band = std::min(band, keep);

    std::vector<uint8_t> line_mask(static_cast<size_t>(lines), 0);
    const int64_t c0 = (lines - band) / 2;
    for (int64_t i = c0; i < c0 + band; ++i) line_mask[static_cast<size_t>(i)] = 1;

    std::vector<int64_t> rest;
    for (int64_t i = 0; i < lines; ++i)
        if (!line_mask[static_cast<size_t>(i)]) rest.push_back(i);
    rng.shuffle(rest);
    for (int64_t i = 0; i < keep - band && i < static_cast<int64_t>(rest.size()); ++i)
        line_mask[static_cast<size_t>(rest[static_cast<size_t>(i)])] = 1;

    auto mask1d = torch::zeros({lines}, torch::kDouble);
    for (int64_t i = 0; i < lines; ++i) mask1d[i] = line_mask[static_cast<size_t>(i)] ? 1.0 : 0.0;
    auto mask = mask1d.unsqueeze(1).expand({lines, image.size(1)}).contiguous();

    auto masked = k * mask.to(torch::kComplexDouble);
    auto recon = torch::fft::ifft2(torch::fft::ifftshift(masked)).abs().to(torch::kFloat);
    return {recon, mask.to(torch::kFloat)};
}

std::vector<torch::Tensor> slice_volume(const torch::Tensor& volume, int64_t drop_first) {
    TORCH_CHECK(volume.dim() == 3, "slice_volume expects a (D, H, W) volume");
    TORCH_CHECK(drop_first >= 0 && drop_first <= volume.size(0), "drop_first out of range");
    std::vector<torch::Tensor> out;
    for (int64_t i = drop_first; i < volume.size(0); ++i) out.push_back(volume[i].clone());
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

namespace {

struct Shape {
    bool box = false;
    std::vector<double> center;  // voxel coords
    std::vector<double> radii;
    double intensity = 0.8;
};

void paint(torch::Tensor& img, torch::Tensor& mask, const Shape& sh) {
    const int64_t rank = img.dim();
    std::vector<int64_t> lo(static_cast<size_t>(rank)), hi(static_cast<size_t>(rank));
    for (int64_t a = 0; a < rank; ++a) {
        lo[static_cast<size_t>(a)] = std::max<int64_t>(
            0, static_cast<int64_t>(std::floor(sh.center[static_cast<size_t>(a)] - sh.radii[static_cast<size_t>(a)])));
        hi[static_cast<size_t>(a)] = std::min<int64_t>(
            img.size(a) - 1,
            static_cast<int64_t>(std::ceil(sh.center[static_cast<size_t>(a)] + sh.radii[static_cast<size_t>(a)])));
    }
    auto inside = [&](const std::vector<int64_t>& p) {
        if (sh.box) return true;  // the bounding box is the box
        double q = 0;
        for (size_t a = 0; a < p.size(); ++a) {
            const double d = (static_cast<double>(p[a]) - sh.center[a]) / sh.radii[a];
            q += d * d;
        }
        return q <= 1.0;
    };
    if (rank == 2) {
        auto ia = img.accessor<float, 2>();
        auto ma = mask.accessor<int64_t, 2>();
        for (int64_t y = lo[0]; y <= hi[0]; ++y)
            for (int64_t x = lo[1]; x <= hi[1]; ++x)
                if (inside({y, x})) {
                    ia[y][x] = static_cast<float>(sh.intensity);
                    ma[y][x] = 1;
                }
    } else {
        auto ia3 = img.accessor<float, 3>();
        auto ma3 = mask.accessor<int64_t, 3>();
        for (int64_t z = lo[0]; z <= hi[0]; ++z)
            for (int64_t y = lo[1]; y <= hi[1]; ++y)
                for (int64_t x = lo[2]; x <= hi[2]; ++x)
                    if (inside({z, y, x})) {
                        ia3[z][y][x] = static_cast<float>(sh.intensity);
                        ma3[z][y][x] = 1;
                    }
    }
}

double gaussian_draw(Rng& rng) {
    // Box-Muller on our deterministic stream
    double u1 = rng.next_double();
    double u2 = rng.next_double();
    u1 = std::max(u1, 1e-12);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> synth_shapes_sample(const std::vector<int64_t>& dims,
                                                            Rng& rng, double min_fg,
                                                            double max_fg) {
    const int64_t rank = static_cast<int64_t>(dims.size());
    TORCH_CHECK(rank == 2 || rank == 3, "shapes task supports ranks 2 and 3");
    const int64_t total = prod(dims);

    for (int attempt = 0; attempt < 64; ++attempt) {
        auto img = torch::zeros(dims, torch::kFloat);
        auto mask = torch::zeros(dims, torch::kLong);

        // smooth background ramp plus a base level
        const double base = rng.uniform(0.10, 0.25);
        const double tilt = rng.uniform(0.0, 0.15);
        const int64_t axis = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(rank)));
        auto ramp = torch::arange(dims[static_cast<size_t>(axis)], torch::kFloat) /
                    static_cast<double>(std::max<int64_t>(1, dims[static_cast<size_t>(axis)] - 1));
        std::vector<int64_t> shape(static_cast<size_t>(rank), 1);
        shape[static_cast<size_t>(axis)] = dims[static_cast<size_t>(axis)];
        img += base + tilt * ramp.view(shape);

        // a few shapes, radii spanning coarse-to-fine scales
        const int64_t count = rng.uniform_int(2, 5);
        for (int64_t i = 0; i < count; ++i) {
            Shape sh;
            sh.box = rng.next_double() < 0.3;
            const double scale = rng.uniform(0.06, 0.22);  // fraction of the extent
            for (int64_t a = 0; a < rank; ++a) {
                const double ext = static_cast<double>(dims[static_cast<size_t>(a)]);
                double r = std::max(1.5, scale * ext * rng.uniform(0.6, 1.4));
                sh.radii.push_back(r);
                sh.center.push_back(rng.uniform(r, ext - 1 - r));
            }
            sh.intensity = rng.uniform(0.55, 0.95);
            paint(img, mask, sh);
        }

        // mild observation noise
        auto flat = img.view({-1});
        auto facc = flat.accessor<float, 1>();
        for (int64_t i = 0; i < flat.size(0); ++i)
            facc[i] = static_cast<float>(
                std::min(1.0, std::max(0.0, facc[i] + 0.02 * gaussian_draw(rng))));

        const double fg = mask.sum().item<double>() / static_cast<double>(total);
        if (fg >= min_fg && fg <= max_fg) return {img, mask};
    }
    throw std::runtime_error("could not hit the requested foreground fraction band");
}

DatasetManifest synth_shapes_dataset(const SynthOpts& o, const std::string& out_dir) {
    const int64_t rank = static_cast<int64_t>(o.dims.size());
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "labels");

    DatasetManifest m;
    m.rank = rank;
    m.task = "segmentation";
    m.root = out_dir;

    Rng root_rng(o.seed);
    const std::string ext = rank == 2 ? ".png" : ".nii";
    for (int64_t i = 0; i < o.n; ++i) {
        auto rng = root_rng.split(static_cast<uint64_t>(i) + 1);
        auto [img, mask] = synth_shapes_sample(o.dims, rng, o.min_foreground, o.max_foreground);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%04lld", static_cast<long long>(i));
        Sample s;
        s.id = std::string("shape_") + buf;
        s.image = "images/" + s.id + ext;
        s.label = "labels/" + s.id + ext;
        io::write_image((fs::path(out_dir) / s.image).string(), img, false);
        io::write_image((fs::path(out_dir) / s.label).string(),
                        rank == 2 ? mask : mask.to(torch::kFloat), true);
        m.samples.push_back(std::move(s));
    }
    m.save((fs::path(out_dir) / "manifest.json").string());
    return m;
}

// ---------------------------------------------------------------------------
// Dataset / loader
// ---------------------------------------------------------------------------

Dataset::Dataset(const DatasetManifest& m, const std::vector<std::string>& ids) {
    m.validate();
    std::set<std::string> want(ids.begin(), ids.end());
    for (const auto& s : m.samples) {
        if (!want.empty() && !want.count(s.id)) continue;
        Item it;
        it.id = s.id;
        it.image = io::read_image((fs::path(m.root) / s.image).string(), false).unsqueeze(0);
        if (!s.label.empty()) {
            const bool seg = m.task == "segmentation";
            auto l = io::read_image((fs::path(m.root) / s.label).string(), seg);
            it.label = seg ? l : l.to(torch::kFloat).unsqueeze(0);
        }
        if (!s.input.empty())
            it.input = io::read_image((fs::path(m.root) / s.input).string(), false).unsqueeze(0);
        items_.push_back(std::move(it));
    }
}

Batch Dataset::collate(const std::vector<int64_t>& indices) const {
    Batch b;
    std::vector<torch::Tensor> imgs, labels, inputs;
    for (int64_t i : indices) {
        const auto& it = get(i);
        b.ids.push_back(it.id);
        imgs.push_back(it.image);
        if (it.label.defined()) labels.push_back(it.label);
        if (it.input.defined()) inputs.push_back(it.input);
    }
    b.image = torch::stack(imgs, 0);
    if (labels.size() == imgs.size()) b.label = torch::stack(labels, 0);
    if (inputs.size() == imgs.size()) b.input = torch::stack(inputs, 0);
    return b;
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size, int64_t epoch,
                                                uint64_t seed, bool shuffle) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    if (shuffle) {
        Rng rng(seed ^ (0x517cc1b727220a95ULL * static_cast<uint64_t>(epoch + 1)));
        rng.shuffle(order);
    }
    std::vector<std::vector<int64_t>> batches;
    for (int64_t s = 0; s < n; s += batch_size) {
        std::vector<int64_t> b;
        for (int64_t i = s; i < std::min(n, s + batch_size); ++i)
            b.push_back(order[static_cast<size_t>(i)]);
        batches.push_back(std::move(b));
    }
    return batches;
}

Loader::Loader(const Dataset& ds, int64_t batch_size, uint64_t seed, int64_t workers)
    : ds_(ds), batch_size_(batch_size), seed_(seed), workers_(workers) {}

Loader::~Loader() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

void Loader::start_epoch(int64_t epoch, bool shuffle) {
    if (worker_.joinable()) {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }
    plan_ = epoch_batches(ds_.size(), batch_size_, epoch, seed_, shuffle);
    cursor_ = 0;
    {
        std::lock_guard<std::mutex> lk(mu_);
        std::queue<Batch>().swap(queue_);
        produced_ = 0;
        stop_ = false;
    }
    if (workers_ > 0) {
        worker_ = std::thread([this] {
            for (size_t i = 0; i < plan_.size(); ++i) {
                auto b = ds_.collate(plan_[i]);
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [this] { return queue_.size() < kQueueCap || stop_; });
                if (stop_) return;
                queue_.push(std::move(b));
                ++produced_;
                cv_.notify_all();
            }
        });
    }
}

std::optional<Batch> Loader::next() {
    if (cursor_ >= plan_.size()) return std::nullopt;
    if (workers_ == 0) return ds_.collate(plan_[cursor_++]);
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [this] { return !queue_.empty() || stop_; });
    if (queue_.empty()) return std::nullopt;
    auto b = std::move(queue_.front());
    queue_.pop();
    ++cursor_;
    cv_.notify_all();
    return b;
}

}  // namespace modim::data
