#pragma once

// Dataset ingestion: IDX images and labels, dynamic binarisation, synthetic
// plane samples, seeded splits and mini-batching.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mixvi/tensor.hpp"

namespace mixvi {

class Rng;
class Target2D;

/// n x d_x pixel intensities in [0, 1] with optional class labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return images.rank() == 2 ? images.rows() : 0; }
  std::size_t dim() const noexcept { return images.rank() == 2 ? images.cols() : 0; }
  bool has_labels() const noexcept { return !labels.empty(); }
  /// Rows at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// First n rows.
  Dataset head(std::size_t n) const;
};

/// Reads an IDX3 image file (magic 0x00000803, big-endian dims); byte b
/// becomes b / 255. Throws FormatError on a bad magic, IoError when the file
/// cannot be opened or is truncated.
Tensor load_idx_images(const std::string& path);
/// IDX1 label file (magic 0x00000801).
std::vector<int> load_idx_labels(const std::string& path);
/// Images plus labels; DataError when the counts disagree.
Dataset load_idx(const std::string& images_path, const std::string& labels_path = {});

/// Writes images as IDX3 with the given image height and width, rounding
/// each value to the nearest byte.
void write_idx_images(const std::string& path, const Tensor& images, std::size_t height, std::size_t width);
void write_idx_labels(const std::string& path, std::span<const int> labels);

/// Standard dataset layout in a directory: train-images-idx3-ubyte and
/// train-labels-idx1-ubyte.
Dataset load_idx_directory(const std::string& dir, std::size_t max_images = 0);

/// Each entry becomes 1 with probability equal to its value. ContractError
/// for values outside [0, 1].
Tensor binarize_dynamic(const Tensor& batch, Rng& rng);

/// n x 2 draws from a plane target: ancestral sampling for Gaussian
/// mixtures, rejection sampling for the ring. SamplingError once the
/// attempts exceed `max_attempts_per_point * n`.
Tensor make_synthetic_2d(const Target2D& target, std::size_t n, Rng& rng, std::size_t max_attempts_per_point = 1000);

struct SplitSpec {
  double train = 0.8;
  double val = 0.07;
  double test = 0.13;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Disjoint index sets covering 0..n-1. Sizes are round(n * train),
/// round(n * val) and the remainder; membership is a seeded permutation.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

Split make_split(std::size_t n, const SplitSpec& spec);

/// Mini-batches over a fixed index set. Epoch e visits the indices in the
/// order of a permutation seeded by (seed, e); the final partial batch is kept.
class BatchIterator {
 public:
  BatchIterator(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);

  std::size_t batch_size() const noexcept { return batch_size_; }
  std::size_t batches_per_epoch() const noexcept;
  std::vector<std::vector<std::size_t>> epoch(std::size_t e) const;

 private:
  std::vector<std::size_t> indices_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

/// Rows of `images` at `indices` as one matrix.
Tensor gather_rows(const Tensor& images, std::span<const std::size_t> indices);

}  // namespace mixvi
