#include "ibq/ar/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ibq/core/nn_ops.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"

namespace ibq {
namespace {

constexpr double kInitStd = 0.02;

Tensor param_normal(Rng& rng, Shape s, DType dtype) {
  return rng_normal(rng, std::move(s), 0.0, kInitStd, dtype).set_requires_grad();
}

Tensor param_zeros(Shape s, DType dtype) { return Tensor::zeros(std::move(s), dtype).set_requires_grad(); }

Tensor param_ones(Shape s, DType dtype) { return Tensor::full(std::move(s), 1.0, dtype).set_requires_grad(); }

Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
  if (rng == nullptr || rate == 0.0) return x;
  return ops::dropout(x, rate, *rng);
}

// (1 + scale)·x + shift
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  return ops::add(ops::mul(x, ops::add_scalar(scale, 1.0)), shift);
}

Tensor attention(const ARBlock& blk, const Tensor& h, std::int64_t B, std::int64_t L, int heads) {
  const std::int64_t w = blk.wq.dim(0);
  Shape s{B, L, w};
  Tensor q = nn::rope(ops::reshape(nn::linear(h, blk.wq, {}), s), heads);
  Tensor k = nn::rope(ops::reshape(nn::linear(h, blk.wk, {}), s), heads);
  Tensor v = ops::reshape(nn::linear(h, blk.wv, {}), s);
  Tensor a = ops::reshape(nn::causal_attention(q, k, v, heads), {B * L, w});
  return nn::linear(a, blk.wo, {});
}

Tensor swiglu(const ARBlock& blk, const Tensor& h) {
  Tensor gate = ops::silu(nn::linear(h, blk.w1, {}));
  return nn::linear(ops::mul(gate, nn::linear(h, blk.w3, {})), blk.w2, {});
}

std::int64_t ceil_to(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

int swiglu_hidden(int width) {
  return static_cast<int>(ceil_to((std::int64_t{8} * width + 2) / 3, 256));
}

int ARConfig::ffn_hidden() const { return swiglu_hidden(width); }

void ARConfig::validate() const {
  if (depth < 1 || width < 1 || heads < 1 || vocab < 2 || seq_len < 1 || num_classes < 1) {
    throw ConfigError("AR config sizes must be positive (vocab ≥ 2)");
  }
  if (width % heads != 0) {
    throw ConfigError("AR width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (head_dim() % 2 != 0) throw ConfigError("AR head dimension must be even for RoPE");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

ARConfig ar_scale_config(int depth, int vocab, int seq_len, int num_classes) {
  if (depth < 1) throw ConfigError("depth must be at least 1");
  ARConfig c;
  c.depth = depth;
  c.width = 64 * depth;
  c.heads = depth;
  c.vocab = vocab;
  c.seq_len = seq_len;
  c.num_classes = num_classes;
  return c;
}

std::int64_t ar_param_count(const ARConfig& cfg) {
  cfg.validate();
  const std::int64_t w = cfg.width, hid = cfg.ffn_hidden();
  const std::int64_t per_layer = 4 * w * w + 3 * w * hid + 6 * w * w + 6 * w + 2 * w;
  return cfg.depth * per_layer + std::int64_t{cfg.vocab} * w + std::int64_t{cfg.num_classes + 1} * w +
         w + 2 * w * w + 2 * w + w * cfg.vocab;
}

Tensor ar_block_forward(const ARBlock& blk, const Tensor& x, const Modulation& mod, int heads,
                        double dropout, Rng* rng) {
  const std::int64_t B = x.dim(0), L = x.dim(1), w = x.dim(2);
  Tensor r = ops::reshape(x, {B * L, w});
  Tensor h = modulate(nn::rmsnorm(r, blk.attn_norm), mod.shift_attn, mod.scale_attn);
  r = ops::add(r, ops::mul(mod.gate_attn, attention(blk, h, B, L, heads)));
  h = modulate(nn::rmsnorm(r, blk.ffn_norm), mod.shift_ffn, mod.scale_ffn);
  r = ops::add(r, ops::mul(mod.gate_ffn, maybe_dropout(swiglu(blk, h), dropout, rng)));
  return ops::reshape(r, {B, L, w});
}

Tensor ar_block_plain(const ARBlock& blk, const Tensor& x, int heads) {
  const std::int64_t B = x.dim(0), L = x.dim(1), w = x.dim(2);
  Tensor r = ops::reshape(x, {B * L, w});
  r = ops::add(r, attention(blk, nn::rmsnorm(r, blk.attn_norm), B, L, heads));
  r = ops::add(r, swiglu(blk, nn::rmsnorm(r, blk.ffn_norm)));
  return ops::reshape(r, {B, L, w});
}

ARModel ARModel::create(const ARConfig& cfg, Rng& rng, DType dtype) {
  cfg.validate();
  ARModel m;
  m.cfg_ = cfg;
  const std::int64_t w = cfg.width, hid = cfg.ffn_hidden();
  m.tok_emb_ = param_normal(rng, {cfg.vocab, w}, dtype);
  m.cls_emb_ = param_normal(rng, {cfg.num_classes + 1, w}, dtype);
  for (int l = 0; l < cfg.depth; ++l) {
    ARBlock b;
    b.attn_norm = param_ones({w}, dtype);
    b.wq = param_normal(rng, {w, w}, dtype);
    b.wk = param_normal(rng, {w, w}, dtype);
    b.wv = param_normal(rng, {w, w}, dtype);
    b.wo = param_normal(rng, {w, w}, dtype);
    b.ffn_norm = param_ones({w}, dtype);
    b.w1 = param_normal(rng, {w, hid}, dtype);
    b.w3 = param_normal(rng, {w, hid}, dtype);
    b.w2 = param_normal(rng, {hid, w}, dtype);
    b.ada_w = param_zeros({w, 6 * w}, dtype);
    b.ada_b = param_zeros({6 * w}, dtype);
    m.blocks_.push_back(std::move(b));
  }
  m.final_norm_ = param_ones({w}, dtype);
  m.final_ada_w_ = param_zeros({w, 2 * w}, dtype);
  m.final_ada_b_ = param_zeros({2 * w}, dtype);
  m.head_ = param_normal(rng, {w, cfg.vocab}, dtype);
  return m;
}

ARForward ARModel::forward(const ARBatch& batch, bool with_loss, const ARForwardOptions& opts) const {
  const std::int64_t B = static_cast<std::int64_t>(batch.labels.size());
  if (B == 0 || batch.tokens.size() != batch.labels.size()) {
    throw ContractError("AR batch needs one token sequence per label");
  }
  const std::int64_t L = static_cast<std::int64_t>(batch.tokens[0].size());
  if (L < 1 || L > cfg_.seq_len) {
    throw DimensionError("AR sequence length " + std::to_string(L) + " outside [1, " +
                         std::to_string(cfg_.seq_len) + "]");
  }
  const std::int64_t w = cfg_.width, K = cfg_.vocab;
  IndexVec rows, targets, label_rows;
  rows.reserve(static_cast<std::size_t>(B * L));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& seq = batch.tokens[static_cast<std::size_t>(b)];
    const int label = batch.labels[static_cast<std::size_t>(b)];
    if (static_cast<std::int64_t>(seq.size()) != L) throw DimensionError("AR batch sequences differ in length");
    if (label < 0 || label >= cfg_.num_classes) {
      throw DataError("class label " + std::to_string(label) + " outside [0, " +
                      std::to_string(cfg_.num_classes) + ")");
    }
    for (auto t : seq) {
      if (t < 0 || t >= K) {
        throw DataError("token index " + std::to_string(t) + " outside [0, " + std::to_string(K) + ")");
      }
    }
    rows.push_back(K + label);
    for (std::int64_t t = 0; t + 1 < L; ++t) rows.push_back(seq[static_cast<std::size_t>(t)]);
    targets.insert(targets.end(), seq.begin(), seq.end());
    label_rows.push_back(label);
  }
  Rng* rng = opts.training ? opts.rng : nullptr;
  if (opts.training && cfg_.dropout > 0 && rng == nullptr) {
    throw ContractError("AR training forward with dropout needs an rng");
  }
  const double p = opts.training ? cfg_.dropout : 0.0;

  Tensor table = ops::concat(tok_emb_, cls_emb_, 0);
  Tensor x = maybe_dropout(ops::gather_rows(table, rows), p, rng);
  x = ops::reshape(x, {B, L, w});

  Tensor cond = opts.condition
                    ? maybe_dropout(ops::gather_rows(cls_emb_, label_rows), p, rng)
                    : Tensor::zeros({B, w}, tok_emb_.dtype());
  Tensor act = ops::silu(cond);
  auto per_row = [&](const Tensor& m) { return ops::reshape(ops::expand_rows(m, L), {B * L, m.dim(1)}); };

  for (const auto& blk : blocks_) {
    Tensor mod = per_row(nn::linear(act, blk.ada_w, blk.ada_b));
    Modulation md{ops::slice(mod, 1, 0, w),     ops::slice(mod, 1, w, w),     ops::slice(mod, 1, 2 * w, w),
                  ops::slice(mod, 1, 3 * w, w), ops::slice(mod, 1, 4 * w, w), ops::slice(mod, 1, 5 * w, w)};
    x = ar_block_forward(blk, x, md, cfg_.heads, p, rng);
  }
  Tensor fmod = per_row(nn::linear(act, final_ada_w_, final_ada_b_));
  Tensor h = modulate(nn::rmsnorm(ops::reshape(x, {B * L, w}), final_norm_), ops::slice(fmod, 1, 0, w),
                      ops::slice(fmod, 1, w, w));
  Tensor logits = nn::linear(h, head_, {});
  ARForward out;
  if (with_loss) out.nll = ops::cross_entropy(logits, targets);
  out.logits = ops::reshape(logits, {B, L, K});
  return out;
}

std::vector<double> ARModel::next_logits(int label, const std::vector<std::int64_t>& prefix) const {
  if (static_cast<std::int64_t>(prefix.size()) >= cfg_.seq_len) {
    throw ContractError("prefix already fills the sequence");
  }
  NoGradGuard guard;
  // The last input position sees the whole prefix; its target is a placeholder.
  ARBatch b{{label}, {prefix}};
  b.tokens[0].push_back(0);
  ARForward f = forward(b, false);
  const std::int64_t L = static_cast<std::int64_t>(b.tokens[0].size()), K = cfg_.vocab;
  std::vector<double> out(static_cast<std::size_t>(K));
  for (std::int64_t k = 0; k < K; ++k) out[static_cast<std::size_t>(k)] = f.logits.value((L - 1) * K + k);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ARModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out = {{"tok_emb", tok_emb_}, {"cls_emb", cls_emb_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "block" + std::to_string(l) + ".";
    for (auto& [n, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"attn_norm", &b.attn_norm}, {"wq", &b.wq}, {"wk", &b.wk}, {"wv", &b.wv},
             {"wo", &b.wo}, {"ffn_norm", &b.ffn_norm}, {"w1", &b.w1}, {"w3", &b.w3},
             {"w2", &b.w2}, {"ada_w", &b.ada_w}, {"ada_b", &b.ada_b}}) {
      out.emplace_back(p + n, *t);
    }
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("final_ada_w", final_ada_w_);
  out.emplace_back("final_ada_b", final_ada_b_);
  out.emplace_back("head", head_);
  return out;
}

std::vector<Tensor> ARModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

std::int64_t ARModel::num_params() const {
  std::int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

std::int64_t sample_logits(const std::vector<double>& logits, const SampleOptions& opts, Rng& rng) {
  const std::int64_t K = static_cast<std::int64_t>(logits.size());
  const int top_k = opts.top_k == 0 ? static_cast<int>(K) : opts.top_k;
  if (!(opts.temperature > 0.0)) throw DomainError("sampling temperature must be positive");
  if (top_k < 1 || top_k > K) {
    throw DomainError("top_k must be in [1, " + std::to_string(K) + "], got " + std::to_string(top_k));
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(top_k));
  if (top_k == 1) return order[0];
  const double mx = logits[static_cast<std::size_t>(order[0])];
  std::vector<double> w;
  double total = 0.0;
  for (auto k : order) {
    w.push_back(std::exp((logits[static_cast<std::size_t>(k)] - mx) / opts.temperature));
    total += w.back();
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < order.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return order[i];
  }
  return order.back();
}

std::vector<std::int64_t> ar_sample(const ARModel& model, int label, const SampleOptions& opts, Rng& rng) {
  const int K = model.config().vocab;
  if (!(opts.temperature > 0.0)) throw DomainError("sampling temperature must be positive");
  if (opts.top_k < 0 || opts.top_k > K) {
    throw DomainError("top_k must be in [1, " + std::to_string(K) + "], got " + std::to_string(opts.top_k));
  }
  std::vector<std::int64_t> seq;
  while (static_cast<int>(seq.size()) < model.config().seq_len) {
    seq.push_back(sample_logits(model.next_logits(label, seq), opts, rng));
  }
  return seq;
}

}  // namespace ibq
