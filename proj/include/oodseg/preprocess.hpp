#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "oodseg/tensor.hpp"

// Spectral preprocessing: per-pixel l1 normalization and equal-interval
// band subsampling.

namespace oodseg {

struct L1NormResult {
    SpectralImage image;
    int zero_pixels = 0;  // pixels with zero channel sum, passed through unchanged
};

inline L1NormResult l1_normalize(const SpectralImage& in) {
    L1NormResult out;
    out.image = in;
    for (int i = 0; i < in.height; ++i) {
        for (int j = 0; j < in.width; ++j) {
            double sum = 0.0;
            for (int b = 0; b < in.bands; ++b) {
                const double v = in.at(i, j, b);
                if (v < 0.0)
                    throw std::invalid_argument("l1_normalize: negative value at pixel (" +
                                                std::to_string(i) + "," + std::to_string(j) + ")");
                sum += v;
            }
            if (sum == 0.0) {
                ++out.zero_pixels;
                continue;
            }
            for (int b = 0; b < in.bands; ++b) out.image.at(i, j, b) = in.at(i, j, b) / sum;
        }
    }
    return out;
}

// Indices round(i*(B-1)/(target-1)) for i = 0..target-1; always keeps the
// first and last band.
inline std::vector<int> subsample_band_indices(int bands, int target) {
    if (target < 2) throw std::invalid_argument("subsample_bands: target must be >= 2");
    if (target > bands) throw std::invalid_argument("subsample_bands: target exceeds band count");
    std::vector<int> idx(target);
    for (int i = 0; i < target; ++i)
        idx[i] = static_cast<int>(std::lround(static_cast<double>(i) * (bands - 1) / (target - 1)));
    return idx;
}

inline SpectralImage subsample_bands(const SpectralImage& in, int target) {
    const std::vector<int> idx = subsample_band_indices(in.bands, target);
    SpectralImage out;
    out.height = in.height;
    out.width = in.width;
    out.bands = target;
    out.data.resize(static_cast<std::size_t>(in.height) * in.width * target);
    for (int i = 0; i < in.height; ++i)
        for (int j = 0; j < in.width; ++j)
            for (int t = 0; t < target; ++t) out.at(i, j, t) = in.at(i, j, idx[t]);
    return out;
}

}  // namespace oodseg
