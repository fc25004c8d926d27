#pragma once

#include <filesystem>
#include <string>

#include "lungct/tensor.hpp"

namespace lungct {

// Image tensors are (H,W,C) double in [0,1], RGB channel order.

// Throws DataError when the file cannot be decoded.
Tensor decode_image_file(const std::filesystem::path& path);
Tensor decode_image_bytes(const std::string& bytes);

void save_image_png(const std::filesystem::path& path, const Tensor& image);

// Bilinear resize of (H,W,C); returns the input untouched when dims already match.
Tensor resize_image(const Tensor& image, int out_h, int out_w);

// Bilinear resize of every image in a (N,H,W,C) batch.
Tensor resize_batch(const Tensor& images, int out_h, int out_w);

// Perceptually uniform colormap over a (H,W) map in [0,1] -> (H,W,3) RGB.
Tensor apply_colormap(const Tensor& gray);

}  // namespace lungct
