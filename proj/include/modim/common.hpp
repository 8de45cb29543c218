#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace modim {

// Thrown when a model configuration violates one of its structural rules.
// The message names the violated rule.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Per-forward state, passed explicitly through every block so that forwards
// stay pure: no block keeps hidden mutable state between calls. `gen` is the
// RNG stream used by stochastic paths (drop-path, VAE sampling, diffusion
// noise) while training.
struct RunCtx {
    torch::Tensor ctx;            // context vector (B, d_ctx); undefined = no context
    bool training = false;
    at::Generator gen;            // required when training with stochastic paths

    bool has_ctx() const { return ctx.defined(); }
    RunCtx with_ctx(torch::Tensor c) const {
        RunCtx r = *this;
        r.ctx = std::move(c);
        return r;
    }
    static RunCtx eval() { return RunCtx{}; }
    static RunCtx train(at::Generator g, torch::Tensor c = {}) {
        return RunCtx{std::move(c), true, std::move(g)};
    }
};

inline at::Generator make_generator(uint64_t seed) {
    auto gen = at::detail::createCPUGenerator();
    gen.set_current_seed(seed);
    return gen;
}

// A batched feature map (batch, channels, d1..dk) with k in {2, 3}: the
// currency every building block consumes and produces.
inline int64_t spatial_rank_of(const torch::Tensor& x) {
    const int64_t rank = x.dim() - 2;
    if (rank != 2 && rank != 3)
        throw ShapeError("patch grid must have 2 or 3 spatial dims, got tensor of dim " +
                         std::to_string(x.dim()));
    return rank;
}

inline std::vector<int64_t> spatial_dims_of(const torch::Tensor& x) {
    const int64_t rank = spatial_rank_of(x);
    std::vector<int64_t> d(x.sizes().begin() + 2, x.sizes().end());
    for (int64_t v : d)
        if (v < 1) throw ShapeError("patch grid spatial dims must be >= 1");
    (void)rank;
    return d;
}

inline void check_patch_grid(const torch::Tensor& x, int64_t expect_rank,
                             int64_t expect_channels = -1) {
    if (spatial_rank_of(x) != expect_rank)
        throw ShapeError("spatial rank mismatch: expected " + std::to_string(expect_rank) +
                         ", got " + std::to_string(spatial_rank_of(x)));
    if (expect_channels >= 0 && x.size(1) != expect_channels)
        throw ShapeError("channel mismatch: expected " + std::to_string(expect_channels) +
                         ", got " + std::to_string(x.size(1)));
}

inline int64_t prod(const std::vector<int64_t>& v) {
    int64_t p = 1;
    for (int64_t x : v) p *= x;
    return p;
}

// Deterministic splittable RNG for data-side randomness (splits, shuffles,
// synthetic generators). Not std::shuffle/std::*_distribution, whose outputs
// are implementation-defined; this one produces identical streams on every
// platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, n)
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    // uniform double in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    Rng split(uint64_t stream) { return Rng(next_u64() ^ (stream * 0xd1342543de82ef95ULL + 1)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[next_below(i)]);
    }

private:
    uint64_t state_;
};

}  // namespace modim
