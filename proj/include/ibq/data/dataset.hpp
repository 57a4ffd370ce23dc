#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ibq/core/tensor.hpp"

namespace ibq {

struct ImageDataset {
  Tensor images;            // [N×3×S×S] f32 in [−1, 1]
  std::vector<int> labels;  // [N]
  int num_classes = 1;
  std::string source;       // "synthetic" or the folder path

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  std::int64_t image_size() const { return images.dim(2); }
  // Rows `idx` as a new [n×3×S×S] tensor.
  Tensor batch(const std::vector<std::int64_t>& idx) const;
  ImageDataset subset(const std::vector<std::int64_t>& idx) const;
};

inline constexpr int kSynthClasses = 10;

// Procedural images: each class has its own palette and motif (disc, ring,
// bars, checker, cross, ...) with seeded position, scale, colour jitter and
// a background gradient. Pure function of (n, size, seed).
ImageDataset synth_generate(std::int64_t n, int size, std::uint64_t seed,
                            int num_classes = kSynthClasses);

struct DatasetSplit {
  ImageDataset train;
  ImageDataset val;
};

// Seeded shuffle, the first round(fraction·N) images (at least one) become
// the held-out split.
DatasetSplit split_dataset(const ImageDataset& ds, double val_fraction, std::uint64_t seed);

struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

// Binary P6 with maxval 255. Throws DataError naming the file on malformed
// input and IoError when unreadable.
PpmImage read_ppm(const std::filesystem::path& path);
PpmImage parse_ppm(const std::string& bytes, const std::string& name);
void write_ppm(const std::filesystem::path& path, const PpmImage& img);

// [3×H×W] in [−1, 1] → bytes round((x + 1)·127.5), clamped.
PpmImage image_to_ppm(const Tensor& chw);
// Center crop to a square, nearest-neighbour resize (source index
// ⌊i·s/size⌋), map bytes via b/127.5 − 1. Returns [3×size×size].
Tensor ppm_to_image(const PpmImage& img, int size);

// *.ppm files in lexicographic order. If the folder contains
// sub-directories instead, each one (sorted) is a class.
ImageDataset load_ppm_folder(const std::filesystem::path& path, int size);

}  // namespace ibq
