#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svdnas/tensor.hpp"

namespace svdnas {

// Images (N, C, H, W) plus optional integer labels (empty when unlabelled).
struct Dataset {
  NdArray<float> images;
  std::vector<int> labels;

  Index size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  bool labelled() const { return !labels.empty(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  NdArray<float> batch_images(Index start, Index count) const;
  std::vector<int> batch_labels(Index start, Index count) const;
  Dataset subset(const std::vector<Index>& indices) const;
  Dataset slice(Index start, Index count) const;
};

struct ProceduralDataset {
  std::uint64_t seed = 0;
  Dataset train;
  Dataset validation;
  std::vector<Index> few_sample;  // indices into train
  std::vector<float> channel_mean, channel_std;
};

inline constexpr Index kDatasetClasses = 10;
inline constexpr Index kImageSize = 16;
inline constexpr Index kTrainSize = 8000;
inline constexpr Index kValidationSize = 2000;
inline constexpr Index kFewSampleSize = 100;

// Ten shape classes rendered with 4x4 supersampling, random colours, position
// and size jitter, and pixel noise. Standardized per channel with train stats.
ProceduralDataset generate_dataset(std::uint64_t seed, Index train_size = kTrainSize,
                                   Index validation_size = kValidationSize);

// Fixed seeded draw of `count` distinct indices from [0, n).
std::vector<Index> sample_indices(Index n, Index count, std::uint64_t seed);

// Manifest JSON at `path`, float blob at path + ".bin", labels (int32) at
// path + ".labels" when present.
void save_dataset(const Dataset& d, const std::string& path, const std::string& extra_json = "{}");
Dataset load_dataset(const std::string& path);

}  // namespace svdnas
