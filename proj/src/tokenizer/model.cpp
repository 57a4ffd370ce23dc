#include "ibq/tokenizer/model.hpp"

#include <cmath>
#include <numeric>

#include "ibq/core/nn_ops.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"

namespace ibq {
namespace {

int width(const TokenizerConfig& cfg, int level) { return cfg.channels << level; }

Conv make_conv(Rng& rng, int cin, int cout, int k, DType dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  Conv c;
  c.w = rng_uniform(rng, {cout, cin, k, k}, -bound, bound, dtype).set_requires_grad();
  c.b = Tensor::zeros({cout}, dtype).set_requires_grad();
  return c;
}

GroupNormParams make_norm(int c, DType dtype) {
  return {Tensor::full({c}, 1.0, dtype).set_requires_grad(),
          Tensor::zeros({c}, dtype).set_requires_grad()};
}

ResBlock make_block(Rng& rng, int cin, int cout, DType dtype) {
  ResBlock r;
  r.norm1 = make_norm(cin, dtype);
  r.conv1 = make_conv(rng, cin, cout, 3, dtype);
  r.norm2 = make_norm(cout, dtype);
  r.conv2 = make_conv(rng, cout, cout, 3, dtype);
  if (cin != cout) r.skip = make_conv(rng, cin, cout, 1, dtype);
  return r;
}

std::vector<ResBlock> make_stack(Rng& rng, int n, int cin, int cout, DType dtype) {
  std::vector<ResBlock> v;
  for (int i = 0; i < n; ++i) v.push_back(make_block(rng, i == 0 ? cin : cout, cout, dtype));
  return v;
}

Tensor conv(const Conv& c, const Tensor& x, int stride = 1) {
  const int k = static_cast<int>(c.w.dim(2));
  return nn::conv2d(x, c.w, c.b, stride, k / 2);
}

Tensor norm_act(const GroupNormParams& n, const Tensor& x) {
  return ops::silu(nn::group_norm(x, norm_groups(static_cast<int>(x.dim(1))), n.gamma, n.beta));
}

Tensor block(const ResBlock& r, const Tensor& x) {
  Tensor h = conv(r.conv1, norm_act(r.norm1, x));
  h = conv(r.conv2, norm_act(r.norm2, h));
  return ops::add(r.skip.w.defined() ? conv(r.skip, x) : x, h);
}

Tensor stack(const std::vector<ResBlock>& blocks, Tensor x) {
  for (const auto& b : blocks) x = block(b, x);
  return x;
}

void add_conv(std::vector<NamedParam>& out, const std::string& name, const Conv& c) {
  out.push_back({name + ".w", c.w});
  out.push_back({name + ".b", c.b});
}

void add_norm(std::vector<NamedParam>& out, const std::string& name, const GroupNormParams& n) {
  out.push_back({name + ".gamma", n.gamma});
  out.push_back({name + ".beta", n.beta});
}

void add_stack(std::vector<NamedParam>& out, const std::string& name,
               const std::vector<ResBlock>& blocks) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = name + "." + std::to_string(i);
    add_norm(out, p + ".norm1", blocks[i].norm1);
    add_conv(out, p + ".conv1", blocks[i].conv1);
    add_norm(out, p + ".norm2", blocks[i].norm2);
    add_conv(out, p + ".conv2", blocks[i].conv2);
    if (blocks[i].skip.w.defined()) add_conv(out, p + ".skip", blocks[i].skip);
  }
}

std::int64_t conv_count(std::int64_t k, std::int64_t a, std::int64_t b) { return k * k * a * b + b; }

std::int64_t block_count(std::int64_t a, std::int64_t b) {
  return 2 * a + conv_count(3, a, b) + 2 * b + conv_count(3, b, b) + (a != b ? conv_count(1, a, b) : 0);
}

std::int64_t stack_count(int n, std::int64_t a, std::int64_t b) {
  std::int64_t s = 0;
  for (int i = 0; i < n; ++i) s += block_count(i == 0 ? a : b, b);
  return s;
}

}  // namespace

int TokenizerConfig::levels() const {
  int l = 0;
  while ((1 << l) < downsample) ++l;
  return l;
}

std::int64_t TokenizerConfig::vocab() const {
  return quantizer == QuantKind::lfq ? std::int64_t{1} << code_dim : codebook_size;
}

void TokenizerConfig::validate() const {
  if (downsample < 1 || (downsample & (downsample - 1)) != 0) {
    throw ConfigError("downsample ratio must be a power of two, got " + std::to_string(downsample));
  }
  if (image_size < 1 || image_size % downsample != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by p=" +
                      std::to_string(downsample));
  }
  if (channels < 1 || num_resblocks < 1 || code_dim < 1) {
    throw ConfigError("channels, num_resblocks and code_dim must be positive");
  }
  if (quantizer == QuantKind::lfq) {
    if (code_dim > kLfqMaxDim) {
      throw ConfigError("LFQ code_dim " + std::to_string(code_dim) + " exceeds " +
                        std::to_string(kLfqMaxDim));
    }
  } else if (codebook_size < 2) {
    throw ConfigError("codebook_size must be at least 2");
  }
  if (levels() > 8) throw ConfigError("downsample ratio too large");
  if (!(logit_scale > 0)) throw ConfigError("logit_scale must be positive");
  if (!(codebook_init_scale >= 0)) throw ConfigError("codebook_init_scale must be non-negative");
}

int norm_groups(int channels) { return std::gcd(channels, 32); }

std::int64_t tokenizer_param_count(const TokenizerConfig& cfg) {
  cfg.validate();
  const int L = cfg.levels(), R = cfg.num_resblocks;
  auto c = [&](int i) -> std::int64_t { return width(cfg, i); };
  std::int64_t n = conv_count(3, 3, c(0));
  for (int i = 0; i < L; ++i) n += stack_count(R, i == 0 ? c(0) : c(i - 1), c(i)) + conv_count(3, c(i), c(i));
  n += stack_count(R, L == 0 ? c(0) : c(L - 1), c(L)) + 2 * c(L) + conv_count(3, c(L), cfg.code_dim);

  n += conv_count(3, cfg.code_dim, c(L)) + stack_count(R, c(L), c(L));
  for (int i = L - 1; i >= 0; --i) n += conv_count(3, c(i + 1), c(i + 1)) + stack_count(R, c(i + 1), c(i));
  n += 2 * c(0) + conv_count(3, c(0), 3);
  if (cfg.quantizer != QuantKind::lfq) n += std::int64_t{cfg.codebook_size} * cfg.code_dim;
  return n;
}

TokenizerModel TokenizerModel::create(const TokenizerConfig& cfg, Rng& rng, DType dtype) {
  cfg.validate();
  TokenizerModel m;
  m.cfg_ = cfg;
  const int L = cfg.levels(), R = cfg.num_resblocks;
  auto c = [&](int i) { return width(cfg, i); };
  Rng enc = rng.fork(1), dec = rng.fork(2), code = rng.fork(3);

  m.enc_in_ = make_conv(enc, 3, c(0), 3, dtype);
  for (int i = 0; i < L; ++i) {
    m.enc_levels_.push_back(make_stack(enc, R, i == 0 ? c(0) : c(i - 1), c(i), dtype));
    m.enc_down_.push_back(make_conv(enc, c(i), c(i), 3, dtype));
  }
  m.enc_mid_ = make_stack(enc, R, L == 0 ? c(0) : c(L - 1), c(L), dtype);
  m.enc_norm_ = make_norm(c(L), dtype);
  m.enc_out_ = make_conv(enc, c(L), cfg.code_dim, 3, dtype);

  m.dec_in_ = make_conv(dec, cfg.code_dim, c(L), 3, dtype);
  m.dec_mid_ = make_stack(dec, R, c(L), c(L), dtype);
  for (int i = L - 1; i >= 0; --i) {
    m.dec_up_.push_back(make_conv(dec, c(i + 1), c(i + 1), 3, dtype));
    m.dec_levels_.push_back(make_stack(dec, R, c(i + 1), c(i), dtype));
  }
  m.dec_norm_ = make_norm(c(0), dtype);
  m.dec_out_ = make_conv(dec, c(0), 3, 3, dtype);

  if (cfg.quantizer == QuantKind::lfq) {
    m.lfq_.dim = cfg.code_dim;
  } else {
    m.codebook_ = Codebook::create(cfg.codebook_size, cfg.code_dim, code, cfg.codebook_init, dtype,
                                   cfg.codebook_init_scale);
  }
  return m;
}

Tensor TokenizerModel::encode(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.image_size) {
    throw DimensionError("encode: expected [B×3×" + std::to_string(cfg_.image_size) + "×" +
                         std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
  }
  Tensor h = conv(enc_in_, images);
  for (std::size_t i = 0; i < enc_levels_.size(); ++i) {
    h = stack(enc_levels_[i], h);
    h = conv(enc_down_[i], h, 2);
  }
  h = stack(enc_mid_, h);
  h = conv(enc_out_, norm_act(enc_norm_, h));
  return nn::to_rows(h);
}

Tensor TokenizerModel::decode(const Tensor& rows, std::int64_t batch) const {
  const std::int64_t g = cfg_.grid();
  if (rows.rank() != 2 || rows.dim(0) != batch * g * g || rows.dim(1) != cfg_.code_dim) {
    throw DimensionError("decode: expected [" + std::to_string(batch * g * g) + "×" +
                         std::to_string(cfg_.code_dim) + "] rows, got " + shape_str(rows.shape()));
  }
  Tensor h = conv(dec_in_, nn::from_rows(rows, batch, g, g));
  h = stack(dec_mid_, h);
  for (std::size_t j = 0; j < dec_up_.size(); ++j) {
    h = conv(dec_up_[j], nn::upsample_nearest2x(h));
    h = stack(dec_levels_[j], h);
  }
  return ops::tanh(conv(dec_out_, norm_act(dec_norm_, h)));
}

QuantOut TokenizerModel::quantize(const Tensor& rows, const QuantMode& mode) const {
  switch (cfg_.quantizer) {
    case QuantKind::ibq: return ibq_quantize(rows, codebook_, {cfg_.logit_scale, false});
    case QuantKind::naive: return naive_vq_quantize(rows, codebook_);
    case QuantKind::vqgan: return vqgan_quantize(rows, codebook_);
    case QuantKind::lfq: return lfq_quantize(rows, lfq_);
    case QuantKind::softvq: return softvq_quantize(rows, codebook_, mode.tau, mode.training);
  }
  throw ContractError("unknown quantizer");
}

Tensor TokenizerModel::code_rows(const IndexVec& indices) const {
  const std::int64_t K = cfg_.vocab();
  for (std::int64_t i : indices) {
    if (i < 0 || i >= K) {
      throw DomainError("token " + std::to_string(i) + " outside vocabulary of " + std::to_string(K));
    }
  }
  const Tensor table = cfg_.quantizer == QuantKind::lfq ? lfq_.codes(dec_in_.w.dtype()) : codebook_.embeddings;
  NoGradGuard guard;
  return ops::gather_rows(table, indices);
}

std::vector<NamedParam> TokenizerModel::named_parameters() const {
  std::vector<NamedParam> out;
  add_conv(out, "enc.in", enc_in_);
  for (std::size_t i = 0; i < enc_levels_.size(); ++i) {
    add_stack(out, "enc.level" + std::to_string(i), enc_levels_[i]);
    add_conv(out, "enc.down" + std::to_string(i), enc_down_[i]);
  }
  add_stack(out, "enc.mid", enc_mid_);
  add_norm(out, "enc.norm", enc_norm_);
  add_conv(out, "enc.out", enc_out_);
  add_conv(out, "dec.in", dec_in_);
  add_stack(out, "dec.mid", dec_mid_);
  for (std::size_t j = 0; j < dec_up_.size(); ++j) {
    add_conv(out, "dec.up" + std::to_string(j), dec_up_[j]);
    add_stack(out, "dec.level" + std::to_string(j), dec_levels_[j]);
  }
  add_norm(out, "dec.norm", dec_norm_);
  add_conv(out, "dec.out", dec_out_);
  if (codebook_.embeddings.defined()) out.push_back({"codebook", codebook_.embeddings});
  return out;
}

std::vector<Tensor> TokenizerModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.value);
  return out;
}

std::int64_t TokenizerModel::num_params() const {
  std::int64_t n = 0;
  for (auto& p : named_parameters()) n += p.value.numel();
  return n;
}

}  // namespace ibq
