#pragma once

#include <torch/torch.h>

#include <condition_variable>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include "modim/common.hpp"

namespace modim::data {

// ---------------------------------------------------------------------------
// Manifests and splits
// ---------------------------------------------------------------------------

struct Sample {
    std::string id;
    std::string image;  // relative to the dataset root
    std::string label;  // optional
    std::string input;  // optional degraded/conditioning input
};

struct DatasetManifest {
    int64_t rank = 2;
    std::string task = "segmentation";  // segmentation | reconstruction | generation
    std::string root;
    std::vector<Sample> samples;

    void validate() const;  // unique ids, consistent label presence
    static DatasetManifest load(const std::string& path);
    void save(const std::string& path) const;
    std::vector<std::string> ids() const;
};

// Assignment of every id to one of 5 folds; folds 1-3 train, 4 validation,
// 5 test. Deterministic given the seed; fold sizes differ by at most one.
struct FoldSplit {
    std::vector<std::string> ids;
    std::vector<int> fold;  // 1..5 per id
    uint64_t seed = 0;

    std::vector<std::string> subset(const std::string& which) const;  // train | val | test
    void save(const std::string& path) const;
    static FoldSplit load(const std::string& path);
};

FoldSplit kfold_split(std::vector<std::string> ids, uint64_t seed);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct PreprocessOpts {
    std::vector<int64_t> target_dims;   // resize target; empty = keep
    std::vector<int64_t> center_crop;   // per-axis crop extent; empty = none
    bool nonzero_crop = false;          // crop to the bounding box of nonzeros first
    bool is_label = false;              // nearest resize, no normalization
};

// nonzero-bounding-box crop -> center crop -> resize -> min-max normalize to [0, 1].
torch::Tensor preprocess(const torch::Tensor& image, const PreprocessOpts& o);

// Simulated accelerated-MRI acquisition on a 2D magnitude image: keeps
// `keep_fraction` of k-space lines (a small central band always survives),
// zero-fills the rest, and returns the magnitude of the inverse transform
// together with the binary line mask (constant along the readout axis).
std::pair<torch::Tensor, torch::Tensor> kspace_undersample(const torch::Tensor& image,
                                                           double keep_fraction, Rng& rng,
                                                           double center_fraction = 0.04);

// Slices a (D, H, W) volume along the stack axis, discarding the first
// `drop_first` slices.
std::vector<torch::Tensor> slice_volume(const torch::Tensor& volume, int64_t drop_first);

// ---------------------------------------------------------------------------
// Synthetic shapes task
// ---------------------------------------------------------------------------

struct SynthOpts {
    int64_t n = 8;
    std::vector<int64_t> dims = {64, 64};
    uint64_t seed = 7;
    double min_foreground = 0.05;
    double max_foreground = 0.40;
};

// Random ellipses and boxes at multiple scales with exact masks; deterministic
// per seed. Writes images/ labels/ manifest.json under `out_dir`.
DatasetManifest synth_shapes_dataset(const SynthOpts& o, const std::string& out_dir);

// In-memory variant used by tests and the desk-scale acceptance runs.
std::pair<torch::Tensor, torch::Tensor> synth_shapes_sample(const std::vector<int64_t>& dims,
                                                            Rng& rng, double min_fg = 0.05,
                                                            double max_fg = 0.40);

// ---------------------------------------------------------------------------
// In-memory dataset and batching
// ---------------------------------------------------------------------------

struct Item {
    std::string id;
    torch::Tensor image;  // (C, d..)
    torch::Tensor label;  // (d..) long for segmentation, (C, d..) float otherwise
    torch::Tensor input;  // optional conditioning input (C, d..)
};

struct Batch {
    std::vector<std::string> ids;
    torch::Tensor image;
    torch::Tensor label;
    torch::Tensor input;
    int64_t size() const { return image.defined() ? image.size(0) : 0; }
};

class Dataset {
public:
    Dataset() = default;
    // Loads the listed ids (all when empty) eagerly from disk.
    Dataset(const DatasetManifest& m, const std::vector<std::string>& ids = {});

    int64_t size() const { return static_cast<int64_t>(items_.size()); }
    const Item& get(int64_t i) const { return items_.at(static_cast<size_t>(i)); }
    void add(Item item) { items_.push_back(std::move(item)); }
    Batch collate(const std::vector<int64_t>& indices) const;

private:
    std::vector<Item> items_;
};

// Pure function of (n, epoch, seed): the batch order for one epoch.
std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size, int64_t epoch,
                                                uint64_t seed, bool shuffle);

// Sequential batch source with an optional single prefetch worker feeding a
// bounded queue. Sample order comes from epoch_batches alone.
class Loader {
public:
    Loader(const Dataset& ds, int64_t batch_size, uint64_t seed, int64_t workers = 0);
    ~Loader();

    void start_epoch(int64_t epoch, bool shuffle);
    std::optional<Batch> next();

private:
    const Dataset& ds_;
    int64_t batch_size_;
    uint64_t seed_;
    int64_t workers_;

    std::vector<std::vector<int64_t>> plan_;
    size_t cursor_ = 0;

    std::thread worker_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::queue<Batch> queue_;
    size_t produced_ = 0;
    bool stop_ = false;
    static constexpr size_t kQueueCap = 4;
};

}  // namespace modim::data
