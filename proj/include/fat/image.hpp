#pragma once

#include <string>

#include "fat/tensor.hpp"

namespace fat {

/// Loads a binary P6 PPM (maxval 255) as a [1,3,H,W] float tensor in [0,1].
Tensor load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Tensor& img);

/// Bilinear resize with half-pixel centers.
Tensor resize_bilinear(const Tensor& img, i64 out_h, i64 out_w);

/// In-place ImageNet normalization: (x - mean) / std per channel.
void normalize_imagenet(Tensor& img);

Tensor load_image_ppm(const std::string& path, i64 resize_to, bool normalize);

}  // namespace fat
