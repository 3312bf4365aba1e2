#include "mixvi/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mixvi/densities.hpp"
#include "mixvi/errors.hpp"
#include "mixvi/rng.hpp"

namespace mixvi {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& is, const std::string& path) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw IoError("truncated IDX header: " + path);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  os.write(b.data(), 4);
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return is;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot create " + path);
  return os;
}

std::vector<unsigned char> read_payload(std::istream& is, std::size_t n, const std::string& path) {
  std::vector<unsigned char> bytes(n);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n))) {
    throw IoError("truncated IDX payload: " + path);
  }
  return bytes;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
  return p;
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.images = gather_rows(images, indices);
  if (has_labels()) {
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  }
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), 0);
  return subset(idx);
}

Tensor load_idx_images(const std::string& path) {
  std::ifstream is = open_in(path);
  const std::uint32_t magic = read_be32(is, path);
  if (magic != kImageMagic) throw FormatError("not an IDX3 image file: " + path);
  const std::size_t n = read_be32(is, path), h = read_be32(is, path), w = read_be32(is, path);
  if (n == 0 || h * w == 0) throw FormatError("empty IDX image file: " + path);
  const std::vector<unsigned char> bytes = read_payload(is, n * h * w, path);
  Tensor images = Tensor::matrix(n, h * w);
  for (std::size_t i = 0; i < bytes.size(); ++i) images[i] = static_cast<double>(bytes[i]) / 255.0;
  return images;
}

std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream is = open_in(path);
  if (read_be32(is, path) != kLabelMagic) throw FormatError("not an IDX1 label file: " + path);
  const std::size_t n = read_be32(is, path);
  const std::vector<unsigned char> bytes = read_payload(is, n, path);
  return {bytes.begin(), bytes.end()};
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset ds;
  ds.images = load_idx_images(images_path);
  if (!labels_path.empty()) {
    ds.labels = load_idx_labels(labels_path);
    if (ds.labels.size() != ds.size()) {
      throw DataError("label count " + std::to_string(ds.labels.size()) + " does not match image count " +
                      std::to_string(ds.size()));
    }
  }
  return ds;
}

void write_idx_images(const std::string& path, const Tensor& images, std::size_t height, std::size_t width) {
  if (images.rank() != 2 || images.cols() != height * width) throw DimensionError("write_idx_images: shape mismatch");
  std::ofstream os = open_out(path);
  write_be32(os, kImageMagic);
  write_be32(os, static_cast<std::uint32_t>(images.rows()));
  write_be32(os, static_cast<std::uint32_t>(height));
  write_be32(os, static_cast<std::uint32_t>(width));
  std::vector<char> bytes(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double v = images[i];
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("write_idx_images: value outside [0, 1]");
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path);
}

void write_idx_labels(const std::string& path, std::span<const int> labels) {
  std::ofstream os = open_out(path);
  write_be32(os, kLabelMagic);
  write_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw ContractError("write_idx_labels: label outside a byte");
    os.put(static_cast<char>(l));
  }
  if (!os) throw IoError("write failed: " + path);
}

Dataset load_idx_directory(const std::string& dir, std::size_t max_images) {
  namespace fs = std::filesystem;
  const fs::path base(dir);
  for (const std::string prefix : {"", "train-"}) {
    const fs::path images = base / (prefix + "images-idx3-ubyte");
    const fs::path labels = base / (prefix + "labels-idx1-ubyte");
    if (fs::exists(images)) {
      Dataset ds = load_idx(images.string(), fs::exists(labels) ? labels.string() : std::string{});
      return max_images > 0 && max_images < ds.size() ? ds.head(max_images) : ds;
    }
  }
  throw IoError("no IDX image file in " + dir);
}

Tensor binarize_dynamic(const Tensor& batch, Rng& rng) {
  Tensor out(batch.shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double p = batch[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("binarize_dynamic: value outside [0, 1]");
    out[i] = rng.uniform() < p ? 1.0 : 0.0;
  }
  return out;
}

Tensor make_synthetic_2d(const Target2D& target, std::size_t n, Rng& rng, std::size_t max_attempts_per_point) {
  if (n == 0) throw ContractError("make_synthetic_2d: n must be positive");
  Tensor out = Tensor::matrix(n, 2);
  if (target.kind() != Target2D::Kind::ring) {
    const auto& means = target.mode_means();
    const auto& weights = target.mode_weights();
    const double sd = std::sqrt(target.mode_variance());
    for (std::size_t i = 0; i < n; ++i) {
      double u = rng.uniform(), acc = 0.0;
      std::size_t k = 0;
      for (; k + 1 < weights.size(); ++k) {
        acc += weights[k];
        if (u < acc) break;
      }
      out(i, 0) = means[k][0] + sd * rng.normal();
      out(i, 1) = means[k][1] + sd * rng.normal();
    }
    return out;
  }
  // Uniform proposals on a square enclosing the shell; the shell's peak log
  // density is the target's log scale, so acceptance is exp(log p - peak).
  const double half = target.radius() + 8.0 * target.width();
  const std::size_t cap = max_attempts_per_point * n;
  std::size_t attempts = 0;
  for (std::size_t i = 0; i < n;) {
    if (attempts++ >= cap) throw SamplingError("ring rejection sampler exceeded " + std::to_string(cap) + " attempts");
    const double x = rng.uniform(-half, half), y = rng.uniform(-half, half);
    if (std::log(rng.uniform()) < target.log_density(x, y) - target.log_scale()) {
      out(i, 0) = x;
      out(i, 1) = y;
      ++i;
    }
  }
  return out;
}

void SplitSpec::validate() const {
  if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
}

Split make_split(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.train));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.val)));
  const std::vector<std::size_t> p = seeded_permutation(n, spec.seed);
  Split s;
  s.train.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(p.begin() + static_cast<std::ptrdiff_t>(n_train), p.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(p.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), p.end());
  return s;
}

BatchIterator::BatchIterator(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : indices_(std::move(indices)), batch_size_(batch_size), seed_(seed) {
  if (indices_.empty()) throw ContractError("BatchIterator: empty split");
  if (batch_size_ == 0 || batch_size_ > indices_.size()) {
    throw ContractError("BatchIterator: batch size must be in [1, split size]");
  }
}

std::size_t BatchIterator::batches_per_epoch() const noexcept {
  return (indices_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::vector<std::size_t>> BatchIterator::epoch(std::size_t e) const {
  const std::vector<std::size_t> p = seeded_permutation(indices_.size(), splitmix64(seed_ ^ splitmix64(e)));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < p.size(); start += batch_size_) {
    std::vector<std::size_t>& b = batches.emplace_back();
    for (std::size_t k = start; k < std::min(start + batch_size_, p.size()); ++k) b.push_back(indices_[p[k]]);
  }
  return batches;
}

Tensor gather_rows(const Tensor& images, std::span<const std::size_t> indices) {
  const std::size_t d = images.cols();
  Tensor out = Tensor::matrix(indices.size(), d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= images.rows()) throw ContractError("gather_rows: index out of range");
    std::copy_n(images.data() + indices[r] * d, d, out.data() + r * d);
  }
  return out;
}

}  // namespace mixvi
