#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mixvi/data.hpp"
#include "mixvi/densities.hpp"
#include "mixvi/errors.hpp"
#include "mixvi/rng.hpp"

using namespace mixvi;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mixvi_data_" + name);
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Idx, TwoImagesScaleEndpoints) {
  const auto p = temp_file("two.idx");
  write_bytes(p, {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 255, 0, 1, 254});
  const Tensor t = load_idx_images(p.string());
  ASSERT_EQ(t.rows(), 2u);
  ASSERT_EQ(t.cols(), 4u);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 1.0);
  EXPECT_EQ(t[2], 0.2);
  EXPECT_EQ(t[6], 1.0 / 255.0);
  EXPECT_EQ(t[7], 254.0 / 255.0);
  std::filesystem::remove(p);
}

TEST(Idx, EveryByteMapsExactly) {
  const auto p = temp_file("bytes.idx");
  std::vector<unsigned char> bytes{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 16, 0, 0, 0, 16};
  for (int b = 0; b < 256; ++b) bytes.push_back(static_cast<unsigned char>(b));
  write_bytes(p, bytes);
  const Tensor t = load_idx_images(p.string());
  for (int b = 0; b < 256; ++b) EXPECT_EQ(t[b], b / 255.0);
  std::filesystem::remove(p);
}

TEST(Idx, BadMagicAndTruncation) {
  const auto p = temp_file("bad.idx");
  write_bytes(p, {0, 0, 8, 1, 0, 0, 0, 1});
  EXPECT_THROW(load_idx_images(p.string()), FormatError);
  write_bytes(p, {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3});
  EXPECT_THROW(load_idx_images(p.string()), IoError);
  write_bytes(p, {0, 0, 8, 3, 0, 0});
  EXPECT_THROW(load_idx_images(p.string()), IoError);
  std::filesystem::remove(p);
  EXPECT_THROW(load_idx_images(p.string()), IoError);
}

TEST(Idx, RoundTripWithLabels) {
  Rng rng(3);
  Tensor images = Tensor::matrix(5, 12);
  for (double& v : images.values()) v = static_cast<double>(rng.index(256)) / 255.0;
  const std::vector<int> labels{3, 1, 4, 1, 5};
  const auto ip = temp_file("rt-images"), lp = temp_file("rt-labels");
  write_idx_images(ip.string(), images, 3, 4);
  write_idx_labels(lp.string(), labels);
  const Dataset ds = load_idx(ip.string(), lp.string());
  EXPECT_EQ(ds.images, images);
  EXPECT_EQ(ds.labels, labels);

  write_idx_labels(lp.string(), std::vector<int>{1, 2});
  EXPECT_THROW(load_idx(ip.string(), lp.string()), DataError);
  std::filesystem::remove(ip);
  std::filesystem::remove(lp);
}

TEST(Binarize, Endpoints) {
  Rng rng(1);
  const Tensor b = binarize_dynamic(Tensor::from_rows({{0.0, 1.0, 0.0, 1.0}}), rng);
  EXPECT_EQ(b, Tensor::from_rows({{0.0, 1.0, 0.0, 1.0}}));
}

TEST(Binarize, HalfIsFair) {
  Rng rng(2);
  const Tensor b = binarize_dynamic(Tensor::matrix(100, 100, 0.5), rng);
  double mean = 0.0;
  for (double v : b.values()) {
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    mean += v / 1e4;
  }
  EXPECT_LT(std::abs(mean - 0.5), 3 * std::sqrt(0.25 / 1e4));
}

TEST(Binarize, DeterministicFreshAndChecked) {
  const Tensor x = Tensor::matrix(10, 10, 0.3);
  Rng a(4), b(4);
  const Tensor first = binarize_dynamic(x, a);
  EXPECT_EQ(first, binarize_dynamic(x, b));
  EXPECT_NE(first, binarize_dynamic(x, a));
  EXPECT_EQ(first.shape(), x.shape());
  EXPECT_THROW(binarize_dynamic(Tensor::from_rows({{1.5}}), a), ContractError);
  EXPECT_THROW(binarize_dynamic(Tensor::from_rows({{-0.1}}), a), ContractError);
}

TEST(Synthetic, BimodalHeavyFraction) {
  Rng rng(5);
  const std::size_t n = 100'000;
  const Tensor z = make_synthetic_2d(Target2D::bimodal(), n, rng);
  std::size_t heavy = 0;
  for (std::size_t i = 0; i < n; ++i) heavy += z(i, 0) + z(i, 1) > 0;
  const double f = static_cast<double>(heavy) / n;
  EXPECT_LT(std::abs(f - 0.8), 3 * std::sqrt(0.16 / n));
}

TEST(Synthetic, RingRadiusMoment) {
  const Target2D ring = Target2D::ring();
  // Radial law r exp(-(r - 2)^2 / (2 w^2)) on r > 0, by quadrature.
  double m0 = 0.0, m1 = 0.0, m2 = 0.0;
  for (double r = 0.5e-4; r < 6.0; r += 1e-4) {
    const double f = r * std::exp(-(r - 2.0) * (r - 2.0) / (2 * 0.04));
    m0 += f;
    m1 += r * f;
    m2 += r * r * f;
  }
  const double mean = m1 / m0, sd = std::sqrt(m2 / m0 - mean * mean);
  Rng rng(6);
  const std::size_t n = 20'000;
  const Tensor z = make_synthetic_2d(ring, n, rng);
  double rbar = 0.0;
  for (std::size_t i = 0; i < n; ++i) rbar += std::hypot(z(i, 0), z(i, 1)) / n;
  EXPECT_LT(std::abs(rbar - mean), 3 * sd / std::sqrt(static_cast<double>(n))) << rbar << " vs " << mean;
}

TEST(Synthetic, SinglePointAndCap) {
  Rng rng(7);
  const Tensor one = make_synthetic_2d(Target2D::ring(), 1, rng);
  ASSERT_EQ(one.rows(), 1u);
  EXPECT_TRUE(std::isfinite(one(0, 0)) && std::isfinite(one(0, 1)));
  const Tensor g = make_synthetic_2d(Target2D::gaussian(3, 3, 1), 1, rng);
  EXPECT_EQ(g.rows(), 1u);
  EXPECT_THROW(make_synthetic_2d(Target2D::ring(2.0, 1e-4), 10, rng, 1), SamplingError);
  EXPECT_THROW(make_synthetic_2d(Target2D::bimodal(), 0, rng), ContractError);
}

TEST(Split, SizesAndPartition) {
  const Split s = make_split(1000, SplitSpec{0.8, 0.07, 0.13, 3});
  EXPECT_EQ(s.train.size(), 800u);
  EXPECT_EQ(s.val.size(), 70u);
  EXPECT_EQ(s.test.size(), 130u);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 1000u);
  EXPECT_EQ(*all.rbegin(), 999u);
  EXPECT_THROW(make_split(10, SplitSpec{0.5, 0.2, 0.2, 0}), ConfigError);
}

TEST(Split, SeededAndDistinct) {
  const Split a = make_split(500, SplitSpec{0.8, 0.1, 0.1, 1});
  const Split b = make_split(500, SplitSpec{0.8, 0.1, 0.1, 1});
  const Split c = make_split(500, SplitSpec{0.8, 0.1, 0.1, 2});
  EXPECT_EQ(a.train, b.train);
  EXPECT_NE(a.train, c.train);
}

TEST(Batches, OrderPartialAndErrors) {
  std::vector<std::size_t> idx(25);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = 100 + i;
  const BatchIterator it(idx, 10, 9);
  const auto e0 = it.epoch(0);
  ASSERT_EQ(e0.size(), 3u);
  EXPECT_EQ(e0[2].size(), 5u);
  EXPECT_EQ(e0, BatchIterator(idx, 10, 9).epoch(0));
  EXPECT_NE(e0, it.epoch(1));
  std::set<std::size_t> seen;
  for (const auto& b : e0) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen, std::set<std::size_t>(idx.begin(), idx.end()));
  EXPECT_THROW(BatchIterator({}, 1, 0), ContractError);
  EXPECT_THROW(BatchIterator(idx, 26, 0), ContractError);
}

TEST(Dataset, SubsetKeepsLabels) {
  Dataset ds{Tensor::from_rows({{0.0}, {0.5}, {1.0}}), {7, 8, 9}};
  const std::vector<std::size_t> pick{2, 0};
  const Dataset sub = ds.subset(pick);
  EXPECT_EQ(sub.images, Tensor::from_rows({{1.0}, {0.0}}));
  EXPECT_EQ(sub.labels, (std::vector<int>{9, 7}));
  EXPECT_EQ(ds.head(2).size(), 2u);
}
