#include "ibq/tokenizer/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"
#include "ibq/data/csv.hpp"

namespace ibq {
namespace {

double item_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

bool finite(double v) { return std::isfinite(v); }

std::vector<std::int64_t> epoch_order(std::uint64_t seed, int epoch, std::int64_t n) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).fork(0x5348554646ull + static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  }
  return order;
}

std::vector<std::int64_t> model_config_ints(const TokenizerConfig& c) {
  return {c.channels, c.num_resblocks, c.downsample, c.code_dim, c.codebook_size, c.image_size,
          static_cast<std::int64_t>(c.quantizer), static_cast<std::int64_t>(c.codebook_init)};
}

TokenizerConfig model_config_from(const TensorArchive& a) {
  auto v = a.get_i64("tokenizer.config");
  if (v.size() != 8) throw DataError("checkpoint tokenizer.config has " + std::to_string(v.size()) + " fields");
  TokenizerConfig c;
  c.channels = static_cast<int>(v[0]);
  c.num_resblocks = static_cast<int>(v[1]);
  c.downsample = static_cast<int>(v[2]);
  c.code_dim = static_cast<int>(v[3]);
  c.codebook_size = static_cast<int>(v[4]);
  c.image_size = static_cast<int>(v[5]);
  if (v[6] < 0 || v[6] > 4 || v[7] < 0 || v[7] > 1) throw DataError("checkpoint has an unknown quantizer");
  c.quantizer = static_cast<QuantKind>(v[6]);
  c.codebook_init = static_cast<CodebookInit>(v[7]);
  c.logit_scale = a.get("tokenizer.logit_scale").value(0);
  return c;
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw DataError("checkpoint entry '" + name + "' has shape " + shape_str(src.shape()) +
                    ", model expects " + shape_str(dst.shape()));
  }
  dispatch(dst.dtype(), [&]<class T>() {
    auto d = dst.mutable_data<T>();
    for (std::int64_t i = 0; i < dst.numel(); ++i) d[i] = static_cast<T>(src.value(i));
  });
}

std::vector<std::string> step_row(std::int64_t step, int epoch, const StepStats& s) {
  return {fmt_int(step),          fmt_int(epoch),        fmt_num(s.lr),
          fmt_num(s.total),       fmt_num(s.recon),      fmt_num(s.quant),
          fmt_num(s.entropy),     fmt_num(s.usage.usage), fmt_num(s.usage.perplexity),
          fmt_num(std::nan(""))};
}

std::vector<std::string> eval_row(std::int64_t step, int epoch, double lr, const EvalStats& e) {
  return {fmt_int(step),        fmt_int(epoch),         fmt_num(lr),
          fmt_num(e.total),     fmt_num(e.recon),       fmt_num(e.quant),
          fmt_num(e.entropy),   fmt_num(e.usage.usage), fmt_num(e.usage.perplexity),
          fmt_num(e.psnr)};
}

}  // namespace

double lr_schedule(std::int64_t step, double base, const std::vector<std::int64_t>& milestones) {
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw ConfigError("lr milestones must be sorted");
  }
  double lr = base;
  for (auto m : milestones) {
    if (step >= m) lr *= kLrDecay;
  }
  return lr;
}

void TokenizerTrainConfig::validate() const {
  model.validate();
  if (epochs < 1 || batch_size < 1 || log_every < 1) {
    throw ConfigError("epochs, batch_size and log_every must be positive");
  }
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (beta < 0) throw ConfigError("beta must be non-negative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw ConfigError("lr milestones must be sorted");
  }
  for (double m : milestones) {
    if (m < 0 || m > 1) throw ConfigError("lr milestones are fractions in [0, 1]");
  }
  if (halt_after_epoch < 0) throw ConfigError("halt_after_epoch must be non-negative");
}

std::vector<std::int64_t> TokenizerTrainConfig::milestone_steps(std::int64_t total) const {
  std::vector<std::int64_t> out;
  for (double m : milestones) out.push_back(std::llround(m * static_cast<double>(total)));
  return out;
}

std::int64_t total_steps(const TokenizerTrainConfig& cfg, std::int64_t train_size) {
  const std::int64_t per_epoch = (train_size + cfg.batch_size - 1) / cfg.batch_size;
  return per_epoch * cfg.epochs;
}

double softvq_tau_at(const TokenizerTrainConfig&, std::int64_t step, std::int64_t total) {
  return softvq_temperature(step, total);
}

TrainState init_train_state(const TokenizerTrainConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(0x4D4F44454Cull);
  TrainState s{TokenizerModel::create(cfg.model, rng), {}, 0, 0, 0};
  AdamHyper h;
  h.lr = cfg.lr;
  h.beta1 = cfg.adam_beta1;
  h.beta2 = cfg.adam_beta2;
  s.optim = OptimState::create(s.model.parameters(), h);
  return s;
}

StepStats tokenizer_step(TrainState& state, const Tensor& batch, const TokenizerTrainConfig& cfg,
                         double lr, double tau) {
  const TokenizerModel& m = state.model;
  auto params = m.parameters();
  zero_grads(params);
  active_tape().clear();
  Tensor z = m.encode(batch);
  QuantOut q = m.quantize(z, {true, tau});
  Tensor ent = attach_losses(z, q, cfg.beta);
  Tensor x_hat = m.decode(q.z_q, batch.dim(0));
  Tensor rec = reconstruction_loss(x_hat, batch, cfg.recon);
  LossBundle lb = assemble_loss({rec, q.quant_loss, ent}, cfg.weights);

  StepStats s;
  s.lr = lr;
  s.total = lb.total.item();
  s.recon = rec.item();
  s.quant = item_or_zero(q.quant_loss);
  s.entropy = item_or_zero(ent);
  s.usage = codebook_usage(q.indices, m.config().vocab());
  if (!finite(s.total)) {
    active_tape().clear();
    throw NumericError("tokenizer loss is not finite (" + fmt_num(s.total) + ")");
  }
  backward(lb.total);
  StepReport r = adam_step(params, state.optim, lr);
  s.grad_norm = r.grad_norm;
  ++state.step;
  return s;
}

EvalStats evaluate_tokenizer(const TokenizerModel& model, const ImageDataset& ds, int batch_size,
                             const QuantMode& mode, const TokenizerTrainConfig& cfg) {
  if (ds.size() == 0) throw DataError("evaluation split is empty");
  NoGradGuard guard;
  EvalStats e;
  UsageAccumulator usage(model.config().vocab());
  double sse = 0.0;
  std::int64_t pixels = 0;
  const std::int64_t n = ds.size();
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t B = std::min<std::int64_t>(batch_size, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(B));
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = ds.batch(idx);
    Tensor z = model.encode(x);
    QuantOut q = model.quantize(z, mode);
    Tensor ent = attach_losses(z, q, cfg.beta);
    Tensor x_hat = model.decode(q.z_q, B);
    Tensor rec = reconstruction_loss(x_hat, x, cfg.recon);
    LossBundle lb = assemble_loss({rec, q.quant_loss, ent}, cfg.weights);
    const double w = static_cast<double>(B) / static_cast<double>(n);
    e.total += w * lb.total.item();
    e.recon += w * rec.item();
    e.quant += w * item_or_zero(q.quant_loss);
    e.entropy += w * item_or_zero(ent);
    sse += mean_squared_error(x_hat, x) * static_cast<double>(x.numel());
    pixels += x.numel();
    usage.add(q.indices);
  }
  e.mse = sse / static_cast<double>(pixels);
  e.psnr = psnr_from_mse(e.mse);
  e.usage = usage.stats();
  return e;
}

void save_train_state(const std::filesystem::path& path, const TrainState& s) {
  TensorArchive a;
  const TokenizerConfig& c = s.model.config();
  a.put_i64("tokenizer.config", model_config_ints(c));
  a.put("tokenizer.logit_scale", Tensor::from_vector({1}, std::vector<double>{c.logit_scale}));
  a.put_i64("train.state", {s.step, s.epoch, s.csv_rows, s.optim.step});
  const AdamHyper& h = s.optim.hyper;
  a.put("adam.hyper", Tensor::from_vector({7}, std::vector<double>{h.lr, h.beta1, h.beta2, h.eps,
                                                                     h.weight_decay,
                                                                     h.decay_matrices_only ? 1.0 : 0.0,
                                                                     h.clip_norm}));
  auto params = s.model.named_parameters();
  for (auto& p : params) a.put("param." + p.name, p.value);
  for (std::size_t i = 0; i < params.size(); ++i) {
    a.put("adam.m." + params[i].name, s.optim.m[i]);
    a.put("adam.v." + params[i].name, s.optim.v[i]);
  }
  a.save(path);
}

TokenizerModel load_tokenizer(const std::filesystem::path& path) {
  TensorArchive a = TensorArchive::load(path);
  Rng rng(0);
  TokenizerModel m = TokenizerModel::create(model_config_from(a), rng);
  for (auto& p : m.named_parameters()) {
    Tensor v = p.value;
    copy_into(v, a.get("param." + p.name), p.name);
  }
  return m;
}

TrainState load_train_state(const std::filesystem::path& path) {
  TensorArchive a = TensorArchive::load(path);
  Rng rng(0);
  TrainState s{TokenizerModel::create(model_config_from(a), rng), {}, 0, 0, 0};
  auto st = a.get_i64("train.state");
  if (st.size() != 4) throw DataError("checkpoint " + path.string() + " has a malformed train.state");
  s.step = st[0];
  s.epoch = static_cast<int>(st[1]);
  s.csv_rows = st[2];
  Tensor hv = a.get("adam.hyper");
  AdamHyper h{hv.value(0), hv.value(1), hv.value(2), hv.value(3), hv.value(4), hv.value(5) != 0.0,
              hv.value(6)};
  auto params = s.model.named_parameters();
  std::vector<Tensor> values;
  for (auto& p : params) {
    Tensor v = p.value;
    copy_into(v, a.get("param." + p.name), p.name);
    values.push_back(v);
  }
  s.optim = OptimState::create(values, h);
  s.optim.step = st[3];
  for (std::size_t i = 0; i < params.size(); ++i) {
    copy_into(s.optim.m[i], a.get("adam.m." + params[i].name), "adam.m." + params[i].name);
    copy_into(s.optim.v[i], a.get("adam.v." + params[i].name), "adam.v." + params[i].name);
  }
  return s;
}

TrainResult train_tokenizer(const TokenizerTrainConfig& cfg, const ImageDataset& train,
                            const ImageDataset& val,
                            const std::optional<std::filesystem::path>& resume) {
  cfg.validate();
  if (train.size() == 0) throw DataError("training split is empty");
  if (train.image_size() != cfg.model.image_size) {
    throw ConfigError("dataset images are " + std::to_string(train.image_size()) +
                      " px but the model expects " + std::to_string(cfg.model.image_size));
  }
  TrainState state = resume ? load_train_state(*resume) : init_train_state(cfg);
  if (resume && model_config_ints(state.model.config()) != model_config_ints(cfg.model)) {
    throw ConfigError("checkpoint " + resume->string() + " was written for a different model config");
  }
  const std::int64_t total = total_steps(cfg, train.size());
  const auto milestones = cfg.milestone_steps(total);

  TrainResult result;
  std::optional<CsvWriter> csv;
  std::filesystem::path ckpt_dir;
  if (!cfg.out_dir.empty()) {
    ckpt_dir = cfg.out_dir / "checkpoints";
    std::filesystem::create_directories(ckpt_dir);
    result.metrics_csv = cfg.out_dir / "metrics.csv";
    if (resume) truncate_csv(result.metrics_csv, static_cast<std::size_t>(state.csv_rows));
    csv.emplace(result.metrics_csv, kTokenizerCsvColumns, resume.has_value());
  }
  if (resume) result.last_checkpoint = *resume;

  auto write = [&](const std::vector<std::string>& row) {
    if (csv) {
      csv->row(row);
      ++state.csv_rows;
    }
  };
  auto fail = [&](const std::string& what) -> NumericError {
    const std::string ref = result.last_checkpoint.empty() ? std::string("none (no epoch completed)")
                                                           : result.last_checkpoint.string();
    return NumericError(what + " at step " + std::to_string(state.step) +
                        "; last good checkpoint: " + ref);
  };

  const int last_epoch = cfg.halt_after_epoch > 0 ? std::min(cfg.halt_after_epoch, cfg.epochs) : cfg.epochs;
  for (int epoch = state.epoch; epoch < last_epoch; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, train.size());
    for (std::int64_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::int64_t B = std::min<std::int64_t>(cfg.batch_size, train.size() - start);
      std::vector<std::int64_t> idx(order.begin() + start, order.begin() + start + B);
      const double lr = lr_schedule(state.step, cfg.lr, milestones);
      const double tau = softvq_tau_at(cfg, state.step, total);
      StepStats s;
      try {
        s = tokenizer_step(state, train.batch(idx), cfg, lr, tau);
      } catch (const NumericError& e) {
        throw fail(e.what());
      }
      if (state.step % cfg.log_every == 0) write(step_row(state.step, epoch, s));
    }
    const double tau = softvq_tau_at(cfg, state.step, total);
    EvalStats ev = evaluate_tokenizer(state.model, val, cfg.batch_size, {false, tau}, cfg);
    if (!finite(ev.total)) throw fail("validation loss is not finite");
    write(eval_row(state.step, epoch, lr_schedule(state.step, cfg.lr, milestones), ev));
    state.epoch = epoch + 1;
    result.epochs.push_back({epoch, state.step, tau, ev});
    if (!ckpt_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ibqa", state.epoch);
      const auto path = ckpt_dir / name;
      save_train_state(path, state);
      if (!cfg.keep_epoch_checkpoints && !result.last_checkpoint.empty() &&
          result.last_checkpoint != path && result.last_checkpoint.parent_path() == ckpt_dir) {
        std::filesystem::remove(result.last_checkpoint);
      }
      result.last_checkpoint = path;
    }
  }
  return result;
}

TokenDataset tokenize_dataset(const TokenizerModel& model, const ImageDataset& ds, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  NoGradGuard guard;
  const TokenizerConfig& c = model.config();
  TokenDataset out;
  out.K = static_cast<std::uint32_t>(c.vocab());
  out.T = static_cast<std::uint32_t>(c.tokens_per_image());
  out.num_classes = static_cast<std::uint32_t>(ds.num_classes);
  for (std::int64_t start = 0; start < ds.size(); start += batch_size) {
    const std::int64_t B = std::min<std::int64_t>(batch_size, ds.size() - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(B));
    std::iota(idx.begin(), idx.end(), start);
    QuantOut q = model.quantize(model.encode(ds.batch(idx)), {false, kSoftVqTauEnd});
    for (std::int64_t b = 0; b < B; ++b) {
      TokenRecord r;
      r.label = static_cast<std::uint16_t>(ds.labels[static_cast<std::size_t>(start + b)]);
      for (std::int64_t t = 0; t < out.T; ++t) {
        r.indices.push_back(static_cast<std::uint32_t>(q.indices[static_cast<std::size_t>(b * out.T + t)]));
      }
      out.records.push_back(std::move(r));
    }
  }
  out.validate();
  return out;
}

}  // namespace ibq
