#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ibq/ar/train.hpp"
#include "ibq/core/nn_ops.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"
#include "ibq/data/archive.hpp"

using namespace ibq;
namespace fs = std::filesystem;

namespace {

ARConfig tiny(int K = 16, int T = 8) {
  ARConfig c;
  c.depth = 2;
  c.width = 16;
  c.heads = 2;
  c.vocab = K;
  c.seq_len = T;
  c.num_classes = 3;
  c.dropout = 0.0;
  return c;
}

ARBatch random_batch(Rng& rng, const ARConfig& c, int B) {
  ARBatch b;
  for (int i = 0; i < B; ++i) {
    b.labels.push_back(static_cast<int>(rng.below(c.num_classes)));
    std::vector<std::int64_t> s;
    for (int t = 0; t < c.seq_len; ++t) s.push_back(static_cast<std::int64_t>(rng.below(c.vocab)));
    b.tokens.push_back(s);
  }
  return b;
}

// Independent count: embeddings, per-layer attention + SwiGLU + AdaLN, final layer.
std::int64_t count_oracle(std::int64_t d, std::int64_t w, std::int64_t K, std::int64_t C) {
  std::int64_t hid = (8 * w + 2) / 3;
  hid = (hid + 255) / 256 * 256;
  const std::int64_t attn = 4 * w * w, ffn = 3 * w * hid, ada = 6 * w * w + 6 * w, norms = 2 * w;
  return K * w + (C + 1) * w + d * (attn + ffn + ada + norms) + w + (2 * w * w + 2 * w) + w * K;
}

void randomize(ARModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : m.parameters()) {
    dispatch(p.dtype(), [&]<class T>() {
      for (T& v : p.mutable_data<T>()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
    });
  }
}

TokenDataset structured_tokens(int n, int K, int T, int classes, std::uint64_t seed) {
  TokenDataset ds{static_cast<std::uint32_t>(K), static_cast<std::uint32_t>(T),
                  static_cast<std::uint32_t>(classes), {}};
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    TokenRecord r;
    r.label = static_cast<std::uint16_t>(i % classes);
    std::uint32_t v = static_cast<std::uint32_t>(rng.below(K));
    for (int t = 0; t < T; ++t) {
      r.indices.push_back(v);
      v = (v + 1 + r.label) % K;
    }
    ds.records.push_back(r);
  }
  return ds;
}

}  // namespace

TEST(ScaleRule, PublishedShapes) {
  ARConfig b = ar_scale_config(16);
  EXPECT_EQ(b.width, 1024);
  EXPECT_EQ(b.heads, 16);
  ARConfig xxl = ar_scale_config(30);
  EXPECT_EQ(xxl.width, 1920);
  EXPECT_EQ(xxl.heads, 30);
  ARConfig toy = ar_scale_config(2, 256, 64, 10);
  EXPECT_EQ(toy.width, 128);
  EXPECT_EQ(toy.heads, 2);
  EXPECT_THROW(ar_scale_config(0), ConfigError);
}

TEST(ParamCount, FormulaMatchesInstantiationAndOracle) {
  for (int d : {1, 2, 3}) {
    ARConfig c = ar_scale_config(d, 64, 16, 5);
    Rng rng(1);
    ARModel m = ARModel::create(c, rng);
    EXPECT_EQ(m.num_params(), ar_param_count(c)) << d;
    EXPECT_EQ(ar_param_count(c), count_oracle(c.depth, c.width, 64, 5)) << d;
  }
  const double b = static_cast<double>(ar_param_count(ar_scale_config(16)));
  EXPECT_NEAR(b / 342e6, 1.0, 0.02);
  EXPECT_EQ(swiglu_hidden(1024), 2816);
  EXPECT_EQ(swiglu_hidden(1536), 4096);
}

TEST(Config, Validation) {
  ARConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.width = 18;
  c.heads = 3;  // head dim 6 ok
  EXPECT_NO_THROW(c.validate());
  c.heads = 6;  // head dim 3 is odd
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AdaLN, ZeroInitBlockIsIdentityAndConditionIsInert) {
  ARConfig c = tiny();
  Rng rng(2);
  ARModel m = ARModel::create(c, rng);
  Tensor x = rng_normal(rng, {2, c.seq_len, c.width});
  Tensor act = ops::silu(rng_normal(rng, {2, c.width}));
  const auto& blk = m.blocks()[0];
  Tensor mod = ops::reshape(ops::expand_rows(nn::linear(act, blk.ada_w, blk.ada_b), c.seq_len),
                            {2 * c.seq_len, 6 * c.width});
  const int w = c.width;
  Modulation md{ops::slice(mod, 1, 0, w), ops::slice(mod, 1, w, w), ops::slice(mod, 1, 2 * w, w),
                ops::slice(mod, 1, 3 * w, w), ops::slice(mod, 1, 4 * w, w), ops::slice(mod, 1, 5 * w, w)};
  Tensor y = ar_block_forward(blk, x, md, c.heads, 0.0, nullptr);
  EXPECT_EQ(y.to_vector(), x.to_vector());

  ARBatch b = random_batch(rng, c, 3);
  auto with = m.forward(b, false, {false, nullptr, true}).logits.to_vector();
  auto without = m.forward(b, false, {false, nullptr, false}).logits.to_vector();
  EXPECT_EQ(with, without);
  active_tape().clear();
}

TEST(AdaLN, IdentityModulationIsPlainBlock) {
  ARConfig c = tiny();
  Rng rng(3);
  ARModel m = ARModel::create(c, rng);
  randomize(m, 4);
  Tensor x = rng_normal(rng, {2, c.seq_len, c.width});
  const std::int64_t rows = 2 * c.seq_len;
  Tensor zero = Tensor::zeros({rows, c.width}), one = Tensor::full({rows, c.width}, 1.0);
  Modulation md{zero, zero, one, zero, zero, one};
  NoGradGuard g;
  EXPECT_EQ(ar_block_forward(m.blocks()[1], x, md, c.heads, 0.0, nullptr).to_vector(),
            ar_block_plain(m.blocks()[1], x, c.heads).to_vector());
}

TEST(Forward, CausalityProbeEveryPosition) {
  ARConfig c = tiny(16, 10);
  Rng rng(5);
  ARModel m = ARModel::create(c, rng);
  randomize(m, 6);
  NoGradGuard g;
  ARBatch base = random_batch(rng, c, 1);
  const auto ref = m.forward(base, false).logits.to_vector();
  for (int t = 0; t < c.seq_len; ++t) {
    ARBatch p = base;
    p.tokens[0][t] = (p.tokens[0][t] + 5) % c.vocab;
    const auto out = m.forward(p, false).logits.to_vector();
    for (int pos = 0; pos < c.seq_len; ++pos) {
      bool same = true;
      for (int k = 0; k < c.vocab; ++k) same &= out[pos * c.vocab + k] == ref[pos * c.vocab + k];
      if (pos <= t) {
        EXPECT_TRUE(same) << "token " << t << " leaked into position " << pos;
      } else {
        EXPECT_FALSE(same) << "token " << t << " did not reach position " << pos;
      }
    }
  }
}

TEST(Forward, UntrainedNllNearUniformAndRangeChecks) {
  ARConfig c = tiny(16, 8);
  Rng rng(7);
  ARModel m = ARModel::create(c, rng);
  NoGradGuard g;
  const double nll = m.forward(random_batch(rng, c, 8), true).nll.item();
  EXPECT_NEAR(nll, std::log(16.0), 0.15 * std::log(16.0));
  ARBatch bad = random_batch(rng, c, 1);
  bad.tokens[0][2] = 16;
  EXPECT_THROW(m.forward(bad, false), DataError);
  bad = random_batch(rng, c, 1);
  bad.labels[0] = 3;
  EXPECT_THROW(m.forward(bad, false), DataError);
}

TEST(Forward, GradientMatchesFiniteDifferences) {
  ARConfig c = tiny(8, 5);
  c.width = 8;
  Rng rng(8);
  ARModel m = ARModel::create(c, rng, DType::f64);
  randomize(m, 9);
  ARBatch b = random_batch(rng, c, 2);
  for (auto& p : m.parameters()) p.zero_grad();
  backward(m.forward(b, true).nll);
  const double eps = 1e-5;
  for (auto& [name, p] : m.named_parameters()) {
    const auto g = p.grad().to_vector();
    auto d = p.mutable_data<double>();
    const std::int64_t stride = std::max<std::int64_t>(1, p.numel() / 12);
    for (std::int64_t i = 0; i < p.numel(); i += stride) {
      const double orig = d[i];
      NoGradGuard ng;
      d[i] = orig + eps;
      const double up = m.forward(b, true).nll.item();
      d[i] = orig - eps;
      const double dn = m.forward(b, true).nll.item();
      d[i] = orig;
      const double fd = (up - dn) / (2 * eps);
      EXPECT_NEAR(g[i], fd, 1e-5 * std::max({1e-3, std::fabs(fd), std::fabs(g[i])}) + 1e-9)
          << name << "[" << i << "]";
    }
  }
}

TEST(Train, OverfitSingleSequence) {
  ARConfig c = tiny(16, 8);
  ARTrainConfig tc;
  tc.model = c;
  tc.lr = 3e-3;
  tc.weight_decay = 0.0;
  ARTrainState s = init_ar_state(tc);
  ARBatch b{{1}, {{3, 1, 4, 1, 5, 9, 2, 6}}};
  double nll = 0;
  for (int i = 0; i < 200; ++i) nll = ar_step(s, b, tc);
  NoGradGuard g;
  EXPECT_LT(s.model.forward(b, true).nll.item(), 0.1) << "last train nll " << nll;
}

TEST(Train, ClassesChangeLogitsAfterTraining) {
  ARConfig c = tiny(16, 8);
  ARTrainConfig tc;
  tc.model = c;
  tc.lr = 3e-3;
  ARTrainState s = init_ar_state(tc);
  TokenDataset ds = structured_tokens(24, 16, 8, 3, 1);
  for (int i = 0; i < 30; ++i) ar_step(s, make_ar_batch(ds, {0, 1, 2, 3, 4, 5}), tc);
  auto a = s.model.next_logits(0, {1, 2});
  auto b = s.model.next_logits(2, {1, 2});
  EXPECT_NE(a, b);
}

TEST(Sample, GreedyRangeDeterminism) {
  ARConfig c = tiny(16, 8);
  Rng rng(10);
  ARModel m = ARModel::create(c, rng);
  randomize(m, 11);
  Rng r1(5), r2(5);
  auto greedy = ar_sample(m, 1, {1.0, 1}, r1);
  std::vector<std::int64_t> manual;
  for (int t = 0; t < c.seq_len; ++t) {
    auto l = m.next_logits(1, manual);
    manual.push_back(std::max_element(l.begin(), l.end()) - l.begin());
  }
  EXPECT_EQ(greedy, manual);
  Rng s1(42), s2(42);
  auto a = ar_sample(m, 2, {1.0, 0}, s1);
  auto b = ar_sample(m, 2, {1.0, 0}, s2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(static_cast<int>(a.size()), c.seq_len);
  for (auto v : a) {
    EXPECT_GE(v, 0);
    EXPECT_LT(v, c.vocab);
  }
  EXPECT_THROW(ar_sample(m, 0, {0.0, 1}, r2), DomainError);
  EXPECT_THROW(ar_sample(m, 0, {1.0, 17}, r2), DomainError);
}

TEST(Sample, TopKRestrictsSupport) {
  std::vector<double> logits = {0.1, 2.0, -1.0, 1.5, 1.5};
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    auto k = sample_logits(logits, {1.0, 2}, rng);
    EXPECT_TRUE(k == 1 || k == 3);
  }
  EXPECT_EQ(sample_logits(logits, {0.5, 1}, rng), 1);
}

TEST(Train, VocabMismatchIsConfigError) {
  ARTrainConfig tc;
  tc.model = tiny(16, 8);
  TokenDataset ds = structured_tokens(10, 32, 8, 3, 2);
  EXPECT_THROW(train_ar(tc, ds, ds), ConfigError);
}

TEST(Train, DeterministicAndResumeBitExact) {
  const fs::path root = fs::temp_directory_path() / "ibq_tests" / "ar_resume";
  fs::remove_all(root);
  ARTrainConfig tc;
  tc.model = tiny(16, 8);
  tc.model.dropout = 0.1;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  tc.seed = 13;
  TokenDataset ds = structured_tokens(40, 16, 8, 3, 3);
  TokenSplit sp = split_tokens(ds, 0.2, 1);

  tc.out_dir = root / "a";
  auto a = train_ar(tc, sp.train, sp.eval);
  tc.out_dir = root / "b";
  auto b = train_ar(tc, sp.train, sp.eval);
  EXPECT_EQ(read_file_bytes(a.metrics_csv), read_file_bytes(b.metrics_csv));

  tc.out_dir = root / "c";
  tc.halt_after_epoch = 1;
  auto first = train_ar(tc, sp.train, sp.eval);
  tc.halt_after_epoch = 0;
  auto resumed = train_ar(tc, sp.train, sp.eval, first.last_checkpoint);
  EXPECT_EQ(read_file_bytes(a.metrics_csv), read_file_bytes(resumed.metrics_csv));
  EXPECT_EQ(read_file_bytes(a.last_checkpoint), read_file_bytes(resumed.last_checkpoint));
  ARModel loaded = load_ar_model(a.last_checkpoint);
  EXPECT_EQ(loaded.num_params(), ar_param_count(tc.model));
}
