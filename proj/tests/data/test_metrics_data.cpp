#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "ibq/core/rng.hpp"
#include "ibq/data/archive.hpp"
#include "ibq/data/csv.hpp"
#include "ibq/data/dataset.hpp"
#include "ibq/data/token_file.hpp"
#include "ibq/metrics/metrics.hpp"

using namespace ibq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "ibq_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string ppm_bytes(int w, int h, const std::vector<std::uint8_t>& rgb, const std::string& header_extra = "") {
  std::string s = "P6\n" + header_extra + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  s.append(rgb.begin(), rgb.end());
  return s;
}

}  // namespace

TEST(Usage, Examples) {
  UsageStats s = codebook_usage(IndexVec(100, 0), 256);
  EXPECT_DOUBLE_EQ(s.usage, 1.0 / 256);
  EXPECT_DOUBLE_EQ(s.perplexity, 1.0);
  IndexVec all;
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 256; ++k) all.push_back(k);
  }
  UsageStats u = codebook_usage(all, 256);
  EXPECT_DOUBLE_EQ(u.usage, 1.0);
  EXPECT_NEAR(u.perplexity, 256.0, 1e-9);
  EXPECT_THROW(codebook_usage({}, 4), ContractError);
  EXPECT_THROW(codebook_usage({4}, 4), DataError);
}

TEST(Usage, CountingOracleMergeAndMonotone) {
  Rng rng(1);
  IndexVec idx;
  for (int i = 0; i < 500; ++i) idx.push_back(static_cast<std::int64_t>(rng.below(64) * rng.below(2)));
  std::map<std::int64_t, int> counts;
  for (auto i : idx) counts[i]++;
  double h = 0;
  for (auto [k, c] : counts) h -= c / 500.0 * std::log(c / 500.0);
  UsageStats s = codebook_usage(idx, 64);
  EXPECT_DOUBLE_EQ(s.usage, counts.size() / 64.0);
  EXPECT_NEAR(s.perplexity, std::exp(h), 1e-9);
  EXPECT_GE(s.perplexity, 1.0);
  EXPECT_LE(s.perplexity, 64.0);

  UsageAccumulator a(64), b(64), whole(64);
  double last = 0;
  for (std::size_t start = 0; start < idx.size(); start += 50) {
    IndexVec chunk(idx.begin() + start, idx.begin() + start + 50);
    (start % 100 ? a : b).add(chunk);
    whole.add(chunk);
    EXPECT_GE(whole.stats().usage, last);
    last = whole.stats().usage;
  }
  UsageAccumulator ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  EXPECT_EQ(ab.stats().counts, whole.stats().counts);
  EXPECT_EQ(ba.stats().counts, whole.stats().counts);
  IndexVec rev(idx.rbegin(), idx.rend());
  EXPECT_DOUBLE_EQ(codebook_usage(rev, 64).perplexity, s.perplexity);
}

TEST(Psnr, Examples) {
  Rng rng(2);
  Tensor x = rng_uniform(rng, {2, 3, 4, 4}, -1, 1, DType::f64);
  EXPECT_TRUE(std::isinf(psnr(x, x)));
  // MSE = peak² = 4 when every pixel is off by 2.
  Tensor y = x.clone();
  for (double& v : y.mutable_data<double>()) v += 2.0;
  EXPECT_NEAR(psnr(y, x), 0.0, 1e-12);
  Tensor z = rng_uniform(rng, {2, 3, 4, 4}, -1, 1, DType::f64);
  double s = 0;
  for (int i = 0; i < x.numel(); ++i) s += std::pow(x.value(i) - z.value(i), 2);
  EXPECT_NEAR(psnr(z, x), 10 * std::log10(4.0 / (s / x.numel())), 1e-12);
}

TEST(DistributionGap, Examples) {
  Rng rng(3);
  Tensor feats = rng_normal(rng, {40, 5}, 0, 1, DType::f64);
  Tensor sub = Tensor::zeros({10, 5}, DType::f64);
  for (int k = 0; k < 10; ++k) {
    for (int j = 0; j < 5; ++j) sub.mutable_data<double>()[k * 5 + j] = feats.value((k * 3) * 5 + j);
  }
  EXPECT_EQ(distribution_gap(sub, feats), 0.0);

  Tensor cluster = rng_normal(rng, {30, 3}, 0, 1e-4, DType::f64);
  for (int i = 0; i < 30; ++i) cluster.mutable_data<double>()[i * 3] += 2.0;
  Tensor codes = Tensor::zeros({5, 3}, DType::f64);
  const double delta[3] = {0.0, 3.0, 4.0};
  for (int k = 0; k < 5; ++k) {
    for (int j = 0; j < 3; ++j) codes.mutable_data<double>()[k * 3 + j] = (j == 0 ? 2.0 : 0.0) + delta[j];
  }
  EXPECT_NEAR(distribution_gap(codes, cluster), 5.0 / 2.0, 1e-3);

  Tensor rc = rng_normal(rng, {7, 4}, 0, 1, DType::f64), rf = rng_normal(rng, {13, 4}, 0, 1, DType::f64);
  double gap = 0, norm = 0;
  for (int n = 0; n < 13; ++n) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += rf.value(n * 4 + j) * rf.value(n * 4 + j);
    norm += std::sqrt(s) / 13;
  }
  for (int k = 0; k < 7; ++k) {
    double best = 1e300;
    for (int n = 0; n < 13; ++n) {
      double s = 0;
      for (int j = 0; j < 4; ++j) s += std::pow(rc.value(k * 4 + j) - rf.value(n * 4 + j), 2);
      best = std::min(best, std::sqrt(s));
    }
    gap += best / 7;
  }
  EXPECT_NEAR(distribution_gap(rc, rf), gap / norm, 1e-12);
  EXPECT_THROW(distribution_gap(rc, Tensor::zeros({3, 5}, DType::f64)), DimensionError);
}

TEST(ExportEmbeddings, RowsColumnsRoundTrip) {
  fs::path dir = scratch("emb");
  Rng rng(4);
  Tensor codes = rng_normal(rng, {6, 3});
  Tensor feats = rng_normal(rng, {4, 3});
  export_embeddings_csv(codes, feats, dir / "e.csv");
  auto rows = read_csv(dir / "e.csv");
  ASSERT_EQ(rows.size(), 1u + 6 + 4);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"source", "d0", "d1", "d2"}));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    ASSERT_EQ(rows[r].size(), 4u);
    EXPECT_EQ(rows[r][0], r <= 6 ? "code" : "feature");
    const Tensor& src = r <= 6 ? codes : feats;
    const std::size_t i = r <= 6 ? r - 1 : r - 7;
    for (int j = 0; j < 3; ++j) EXPECT_EQ(std::stof(rows[r][j + 1]), src.data<float>()[i * 3 + j]);
  }
}

TEST(Synth, DeterministicShapeRange) {
  ImageDataset a = synth_generate(100, 32, 7);
  ImageDataset b = synth_generate(100, 32, 7);
  EXPECT_EQ(a.images.shape(), (Shape{100, 3, 32, 32}));
  EXPECT_EQ(std::memcmp(a.images.data<float>().data(), b.images.data<float>().data(),
                        a.images.numel() * sizeof(float)),
            0);
  for (float v : a.images.data<float>()) {
    ASSERT_GE(v, -1.0f);
    ASSERT_LE(v, 1.0f);
  }
  ImageDataset c = synth_generate(100, 32, 8);
  EXPECT_NE(a.images.to_vector(), c.images.to_vector());
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Synth, ClassesRecoverableFromMeanColour) {
  // Nearest-centroid on the per-image mean colour, centroids from the first
  // half, accuracy on the second. Chance is 1/10.
  ImageDataset ds = synth_generate(400, 32, 11);
  const int C = ds.num_classes;
  const std::int64_t px = 32 * 32;
  std::vector<std::array<double, 3>> colour(400);
  for (int i = 0; i < 400; ++i) {
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (std::int64_t p = 0; p < px; ++p) s += ds.images.value((i * 3 + c) * px + p);
      colour[i][c] = s / px;
    }
  }
  std::vector<std::array<double, 3>> mean(C, {0, 0, 0});
  std::vector<int> n(C, 0);
  for (int i = 0; i < 200; ++i) {
    for (int c = 0; c < 3; ++c) mean[ds.labels[i]][c] += colour[i][c];
    n[ds.labels[i]]++;
  }
  for (int k = 0; k < C; ++k) {
    for (int c = 0; c < 3; ++c) mean[k][c] /= n[k];
  }
  int correct = 0;
  for (int i = 200; i < 400; ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < C; ++k) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += std::pow(colour[i][c] - mean[k][c], 2);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == ds.labels[i];
  }
  EXPECT_GT(correct / 200.0, 0.5) << "accuracy " << correct / 200.0;
}

TEST(Split, SeededAndDisjoint) {
  ImageDataset ds = synth_generate(50, 8, 1);
  DatasetSplit s1 = split_dataset(ds, 0.1, 3), s2 = split_dataset(ds, 0.1, 3);
  EXPECT_EQ(s1.val.size(), 5);
  EXPECT_EQ(s1.train.size(), 45);
  EXPECT_EQ(s1.val.images.to_vector(), s2.val.images.to_vector());
}

TEST(Ppm, HandCraftedFixture) {
  // 2×2: red, green / blue, (10, 128, 255)
  std::vector<std::uint8_t> rgb = {255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 128, 255};
  PpmImage img = parse_ppm(ppm_bytes(2, 2, rgb, "# comment\n"), "fixture");
  Tensor t = ppm_to_image(img, 2);
  const std::vector<double> expect = {
      1, -1, -1, 10 / 127.5 - 1,           // R plane
      -1, 1, -1, 128 / 127.5 - 1,          // G plane
      -1, -1, 1, 1};                       // B plane
  for (int i = 0; i < 12; ++i) EXPECT_EQ(t.value(i), static_cast<float>(expect[i]));
}

TEST(Ppm, WhiteCropResizeAndErrors) {
  PpmImage white{4, 4, std::vector<std::uint8_t>(48, 255)};
  for (double v : ppm_to_image(white, 2).to_vector()) EXPECT_EQ(v, 1.0);
  // 64×32 input: the centre 32×32 (columns 16..47) survives.
  PpmImage wide{64, 32, std::vector<std::uint8_t>(64 * 32 * 3)};
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 64; ++x) wide.rgb[(y * 64 + x) * 3] = static_cast<std::uint8_t>(x);
  }
  Tensor t = ppm_to_image(wide, 32);
  for (int x = 0; x < 32; ++x) EXPECT_EQ(t.value(5 * 32 + x), static_cast<float>((16 + x) / 127.5 - 1));
  EXPECT_THROW(parse_ppm("P3\n1 1\n255\n\0\0\0", "a.ppm"), DataError);
  EXPECT_THROW(parse_ppm(std::string("P6\n1 1\n65535\n") + std::string(6, '\0'), "b.ppm"), DataError);
  EXPECT_THROW(parse_ppm("P6\n2 2\n255\nabc", "c.ppm"), DataError);
  try {
    parse_ppm("P6\nx", "named.ppm");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("named.ppm"), std::string::npos);
  }
}

TEST(Ppm, FolderRoundTrip) {
  fs::path dir = scratch("ppm");
  ImageDataset ds = synth_generate(3, 8, 5);
  for (int i = 0; i < 3; ++i) {
    Tensor img = ds.batch({i});
    write_ppm(dir / ("img" + std::to_string(i) + ".ppm"),
              image_to_ppm(Tensor::from_vector({3, 8, 8}, std::vector<float>(img.data<float>().begin(),
                                                                             img.data<float>().end()))));
  }
  ImageDataset back = load_ppm_folder(dir, 8);
  ASSERT_EQ(back.size(), 3);
  for (int i = 0; i < back.images.numel(); ++i) {
    EXPECT_NEAR(back.images.value(i), ds.images.value(i), 1.0 / 127.5 + 1e-6);
  }
  // Re-encoding the loaded bytes is exact.
  for (int i = 0; i < 3; ++i) {
    PpmImage orig = read_ppm(dir / ("img" + std::to_string(i) + ".ppm"));
    Tensor img = back.batch({i});
    PpmImage again = image_to_ppm(Tensor::from_vector({3, 8, 8}, std::vector<float>(img.data<float>().begin(),
                                                                                    img.data<float>().end())));
    EXPECT_EQ(again.rgb, orig.rgb);
  }
  EXPECT_THROW(load_ppm_folder(dir / "missing", 8), DataError);
}

TEST(Archive, RoundTripByteExact) {
  fs::path dir = scratch("archive");
  Rng rng(6);
  TensorArchive a;
  a.put("w", rng_normal(rng, {3, 4}));
  a.put("b", rng_normal(rng, {5}, 0, 1, DType::f64));
  a.put_i64("step", {42, -1});
  a.put_u64("rng", {0xDEADBEEFCAFEF00Dull});
  a.save(dir / "a.ibqa");
  TensorArchive b = TensorArchive::load(dir / "a.ibqa");
  b.save(dir / "b.ibqa");
  EXPECT_EQ(read_file_bytes(dir / "a.ibqa"), read_file_bytes(dir / "b.ibqa"));
  EXPECT_EQ(b.get("w").to_vector(), a.get("w").to_vector());
  EXPECT_EQ(b.get("b").dtype(), DType::f64);
  EXPECT_EQ(b.get_i64("step"), (std::vector<std::int64_t>{42, -1}));
  EXPECT_EQ(b.get_u64("rng")[0], 0xDEADBEEFCAFEF00Dull);
  EXPECT_THROW(a.put("w", Tensor::zeros({1})), ContractError);
  EXPECT_THROW(b.get("nope"), DataError);
}

TEST(Archive, HandCraftedFixtureAndEmpty) {
  const std::vector<std::uint8_t> fixture = {
      'I', 'B', 'Q', 'A', 1, 0, 0, 0, 1, 0, 0, 0,  // magic, version 1, one entry
      1, 0, 0, 0, 'x',                             // name "x"
      2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0,          // rank 2, dims (1, 2)
      0,                                           // f32
      0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x20, 0xC0};  // 1.0f, -2.5f
  TensorArchive a = TensorArchive::deserialize(fixture);
  Tensor x = a.get("x");
  EXPECT_EQ(x.shape(), (Shape{1, 2}));
  EXPECT_EQ(x.data<float>()[0], 1.0f);
  EXPECT_EQ(x.data<float>()[1], -2.5f);
  EXPECT_EQ(a.serialize(), fixture);
  const std::vector<std::uint8_t> empty = {'I', 'B', 'Q', 'A', 1, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(TensorArchive{}.serialize(), empty);
  EXPECT_TRUE(TensorArchive::deserialize(empty).entries().empty());
}

TEST(Archive, CorruptionIsRejected) {
  TensorArchive a;
  a.put("w", Tensor::full({2, 2}, 1.5));
  auto bytes = a.serialize();
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(TensorArchive::deserialize(bad_magic), DataError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(TensorArchive::deserialize(bad_version), DataError);
  auto bad_len = bytes;
  bad_len[12] = 200;  // name length
  EXPECT_THROW(TensorArchive::deserialize(bad_len), DataError);
  auto bad_dim = bytes;
  bad_dim[12 + 4 + 1 + 4] = 7;  // first dim
  EXPECT_THROW(TensorArchive::deserialize(bad_dim), DataError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(TensorArchive::deserialize(truncated), DataError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(TensorArchive::deserialize(trailing), DataError);
  TensorArchive dup;
  dup.put("w", Tensor::full({1}, 1.0));
  auto d = dup.serialize();
  d[8] = 2;
  auto tail = std::vector<std::uint8_t>(d.begin() + 12, d.end());
  d.insert(d.end(), tail.begin(), tail.end());
  EXPECT_THROW(TensorArchive::deserialize(d), DataError);
}

TEST(TokenFile, RoundTripAndValidation) {
  fs::path dir = scratch("tokens");
  TokenDataset t;
  t.K = 256;
  t.T = 4;
  t.num_classes = 3;
  t.records = {{2, {1, 255, 0, 7}}, {0, {3, 3, 3, 3}}};
  t.save(dir / "t.ibqk");
  auto bytes = read_file_bytes(dir / "t.ibqk");
  EXPECT_EQ(bytes.size(), 20u + 2 * (2 + 16));
  TokenDataset back = TokenDataset::load(dir / "t.ibqk");
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.records[0].indices[1], 255u);
  EXPECT_EQ(back.records[0].label, 2);
  auto bad = bytes;
  bad[20 + 2 + 4] = 0;  // index 255 → 256 via the next byte
  bad[20 + 2 + 5] = 1;
  EXPECT_THROW(TokenDataset::deserialize(bad), DataError);
  auto shortb = bytes;
  shortb.pop_back();
  EXPECT_THROW(TokenDataset::deserialize(shortb), DataError);
  t.records[1].label = 3;
  EXPECT_THROW(t.serialize(), DataError);
}

TEST(Csv, WriterFormatting) {
  fs::path dir = scratch("csv");
  {
    CsvWriter w(dir / "m.csv", {"step", "loss", "psnr_val"});
    w.row({fmt_int(1), fmt_num(0.25), fmt_num(std::nan(""))});
    EXPECT_THROW(w.row({"1"}), ContractError);
  }
  {
    CsvWriter w(dir / "m.csv", {"step", "loss", "psnr_val"}, true);
    w.row({fmt_int(2), fmt_num(1.0 / 3), fmt_num(31.5)});
  }
  std::ifstream in(dir / "m.csv", std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "step,loss,psnr_val\n1,0.25,\n2,0.333333333,31.5\n");
  truncate_csv(dir / "m.csv", 1);
  auto rows = read_csv(dir / "m.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1], (std::vector<std::string>{"1", "0.25", ""}));
}
