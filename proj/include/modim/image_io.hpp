#pragma once

#include <torch/torch.h>

#include <string>

namespace modim::io {

// 2D grayscale PNG (8- or 16-bit). Values are mapped to/from [0, 1] floats.
torch::Tensor read_png(const std::string& path);                 // (H, W) float
void write_png(const std::string& path, const torch::Tensor& img, int bit_depth = 16);

// Label maps round-trip through 8-bit PNG as raw class ids.
torch::Tensor read_png_labels(const std::string& path);          // (H, W) long
void write_png_labels(const std::string& path, const torch::Tensor& labels);

// Minimal single-file NIfTI-1 (.nii), float32, no compression.
torch::Tensor read_nifti(const std::string& path);               // (D, H, W) float
void write_nifti(const std::string& path, const torch::Tensor& vol);

// Dispatch on extension: .png for 2D, .nii for 3D volumes.
torch::Tensor read_image(const std::string& path, bool labels = false);
void write_image(const std::string& path, const torch::Tensor& img, bool labels = false);

}  // namespace modim::io
