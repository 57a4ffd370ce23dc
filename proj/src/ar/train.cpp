#include "ibq/ar/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ibq/core/tape.hpp"
#include "ibq/data/archive.hpp"
#include "ibq/data/csv.hpp"

namespace ibq {
namespace {

std::vector<std::int64_t> shuffled(std::uint64_t seed, std::uint64_t stream, std::int64_t n) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).fork(stream);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  }
  return order;
}

std::vector<std::int64_t> config_ints(const ARConfig& c) {
  return {c.depth, c.width, c.heads, c.vocab, c.seq_len, c.num_classes};
}

ARConfig config_from(const TensorArchive& a) {
  auto v = a.get_i64("ar.config");
  if (v.size() != 6) throw DataError("checkpoint ar.config has " + std::to_string(v.size()) + " fields");
  ARConfig c;
  c.depth = static_cast<int>(v[0]);
  c.width = static_cast<int>(v[1]);
  c.heads = static_cast<int>(v[2]);
  c.vocab = static_cast<int>(v[3]);
  c.seq_len = static_cast<int>(v[4]);
  c.num_classes = static_cast<int>(v[5]);
  c.dropout = a.get("ar.dropout").value(0);
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

AdamHyper hyper_of(const ARTrainConfig& cfg) {
  AdamHyper h;
  h.lr = cfg.lr;
  h.beta1 = cfg.beta1;
  h.beta2 = cfg.beta2;
  h.weight_decay = cfg.weight_decay;
  h.decay_matrices_only = true;
  h.clip_norm = cfg.clip_norm;
  return h;
}

}  // namespace

void ARTrainConfig::validate() const {
  model.validate();
  if (epochs < 1 || batch_size < 1 || log_every < 1) {
    throw ConfigError("epochs, batch_size and log_every must be positive");
  }
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("Adam betas must be in [0, 1)");
  if (weight_decay < 0 || clip_norm < 0) throw ConfigError("weight_decay and clip_norm must be non-negative");
  if (halt_after_epoch < 0) throw ConfigError("halt_after_epoch must be non-negative");
}

void check_ar_compatible(const ARConfig& cfg, const TokenDataset& ds) {
  if (static_cast<std::uint32_t>(cfg.vocab) != ds.K) {
    throw ConfigError("AR vocab " + std::to_string(cfg.vocab) + " does not match the tokenizer's K=" +
                      std::to_string(ds.K));
  }
  if (static_cast<std::uint32_t>(cfg.seq_len) != ds.T) {
    throw ConfigError("AR seq_len " + std::to_string(cfg.seq_len) + " does not match the token length " +
                      std::to_string(ds.T));
  }
  if (static_cast<std::uint32_t>(cfg.num_classes) < ds.num_classes) {
    throw ConfigError("AR num_classes " + std::to_string(cfg.num_classes) + " is below the dataset's " +
                      std::to_string(ds.num_classes));
  }
}

TokenSplit split_tokens(const TokenDataset& ds, double eval_fraction, std::uint64_t seed) {
  const std::int64_t n = static_cast<std::int64_t>(ds.records.size());
  if (n < 2) throw DataError("token dataset needs at least two records to split");
  if (!(eval_fraction > 0 && eval_fraction < 1)) throw ConfigError("eval fraction must be in (0, 1)");
  const std::int64_t held = std::clamp<std::int64_t>(std::llround(eval_fraction * static_cast<double>(n)), 1, n - 1);
  auto order = shuffled(seed, 0x53504C4954ull, n);
  std::sort(order.begin(), order.begin() + held);
  std::sort(order.begin() + held, order.end());
  TokenSplit s;
  s.train = s.eval = TokenDataset{ds.K, ds.T, ds.num_classes, {}};
  for (std::int64_t i = 0; i < n; ++i) {
    (i < held ? s.eval : s.train).records.push_back(ds.records[static_cast<std::size_t>(order[i])]);
  }
  return s;
}

ARTrainState init_ar_state(const ARTrainConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(0x4152);
  ARTrainState s{ARModel::create(cfg.model, rng), {}, 0, 0, 0};
  s.optim = OptimState::create(s.model.parameters(), hyper_of(cfg));
  return s;
}

ARBatch make_ar_batch(const TokenDataset& ds, const std::vector<std::int64_t>& idx) {
  ARBatch b;
  for (auto i : idx) {
    const TokenRecord& r = ds.records.at(static_cast<std::size_t>(i));
    b.labels.push_back(r.label);
    b.tokens.emplace_back(r.indices.begin(), r.indices.end());
  }
  return b;
}

double ar_step(ARTrainState& state, const ARBatch& batch, const ARTrainConfig& cfg) {
  auto params = state.model.parameters();
  zero_grads(params);
  active_tape().clear();
  Rng rng = Rng(cfg.seed).fork(0x44524F50ull + static_cast<std::uint64_t>(state.step));
  ARForward f = state.model.forward(batch, true, {true, &rng, true});
  const double nll = f.nll.item();
  if (!std::isfinite(nll)) {
    active_tape().clear();
    throw NumericError("AR loss is not finite");
  }
  backward(f.nll);
  adam_step(params, state.optim, cfg.lr);
  ++state.step;
  return nll;
}

double ar_eval_nll(const ARModel& model, const TokenDataset& ds, int batch_size) {
  if (ds.records.empty()) throw DataError("evaluation token set is empty");
  NoGradGuard guard;
  const std::int64_t n = static_cast<std::int64_t>(ds.records.size());
  double total = 0.0;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t B = std::min<std::int64_t>(batch_size, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(B));
    std::iota(idx.begin(), idx.end(), start);
    total += model.forward(make_ar_batch(ds, idx), true).nll.item() * static_cast<double>(B);
  }
  return total / static_cast<double>(n);
}

void save_ar_state(const std::filesystem::path& path, const ARTrainState& s) {
  TensorArchive a;
  a.put_i64("ar.config", config_ints(s.model.config()));
  a.put("ar.dropout", Tensor::from_vector({1}, std::vector<double>{s.model.config().dropout}));
  a.put_i64("train.state", {s.step, s.epoch, s.csv_rows, s.optim.step});
  const AdamHyper& h = s.optim.hyper;
  a.put("adam.hyper", Tensor::from_vector({7}, std::vector<double>{h.lr, h.beta1, h.beta2, h.eps,
                                                                     h.weight_decay,
                                                                     h.decay_matrices_only ? 1.0 : 0.0,
                                                                     h.clip_norm}));
  auto params = s.model.named_parameters();
  for (auto& [n, t] : params) a.put("param." + n, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    a.put("adam.m." + params[i].first, s.optim.m[i]);
    a.put("adam.v." + params[i].first, s.optim.v[i]);
  }
  a.save(path);
}

ARModel load_ar_model(const std::filesystem::path& path) {
  TensorArchive a = TensorArchive::load(path);
  Rng rng(0);
  ARModel m = ARModel::create(config_from(a), rng);
  for (auto& [n, t] : m.named_parameters()) {
    Tensor v = t;
    copy_into(v, a.get("param." + n), n);
  }
  return m;
}

ARTrainState load_ar_state(const std::filesystem::path& path) {
  TensorArchive a = TensorArchive::load(path);
  ARTrainState s{load_ar_model(path), {}, 0, 0, 0};
  auto st = a.get_i64("train.state");
  if (st.size() != 4) throw DataError("checkpoint " + path.string() + " has a malformed train.state");
  s.step = st[0];
  s.epoch = static_cast<int>(st[1]);
  s.csv_rows = st[2];
  Tensor hv = a.get("adam.hyper");
  AdamHyper h{hv.value(0), hv.value(1), hv.value(2), hv.value(3), hv.value(4), hv.value(5) != 0.0,
              hv.value(6)};
  auto params = s.model.named_parameters();
  s.optim = OptimState::create(s.model.parameters(), h);
  s.optim.step = st[3];
  for (std::size_t i = 0; i < params.size(); ++i) {
    copy_into(s.optim.m[i], a.get("adam.m." + params[i].first), "adam.m." + params[i].first);
    copy_into(s.optim.v[i], a.get("adam.v." + params[i].first), "adam.v." + params[i].first);
  }
  return s;
}

ARTrainResult train_ar(const ARTrainConfig& cfg, const TokenDataset& train, const TokenDataset& eval,
                       const std::optional<std::filesystem::path>& resume) {
  cfg.validate();
  check_ar_compatible(cfg.model, train);
  check_ar_compatible(cfg.model, eval);
  if (train.records.empty()) throw DataError("training token set is empty");
  ARTrainState state = resume ? load_ar_state(*resume) : init_ar_state(cfg);
  if (resume && config_ints(state.model.config()) != config_ints(cfg.model)) {
    throw ConfigError("checkpoint " + resume->string() + " was written for a different AR config");
  }

  ARTrainResult result;
  std::optional<CsvWriter> csv;
  std::filesystem::path ckpt_dir;
  if (!cfg.out_dir.empty()) {
    ckpt_dir = cfg.out_dir / "checkpoints";
    std::filesystem::create_directories(ckpt_dir);
    result.metrics_csv = cfg.out_dir / "metrics.csv";
    if (resume) truncate_csv(result.metrics_csv, static_cast<std::size_t>(state.csv_rows));
    csv.emplace(result.metrics_csv, kArCsvColumns, resume.has_value());
  }
  if (resume) result.last_checkpoint = *resume;
  auto write = [&](const std::vector<std::string>& row) {
    if (csv) {
      csv->row(row);
      ++state.csv_rows;
    }
  };

  const std::int64_t n = static_cast<std::int64_t>(train.records.size());
  const int last_epoch = cfg.halt_after_epoch > 0 ? std::min(cfg.halt_after_epoch, cfg.epochs) : cfg.epochs;
  for (int epoch = state.epoch; epoch < last_epoch; ++epoch) {
    const auto order = shuffled(cfg.seed, 0x4550u + static_cast<std::uint64_t>(epoch), n);
    double sum = 0.0;
    int steps = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t B = std::min<std::int64_t>(cfg.batch_size, n - start);
      std::vector<std::int64_t> idx(order.begin() + start, order.begin() + start + B);
      double nll = 0.0;
      try {
        nll = ar_step(state, make_ar_batch(train, idx), cfg);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step) +
                           "; last good checkpoint: " +
                           (result.last_checkpoint.empty() ? std::string("none") : result.last_checkpoint.string()));
      }
      sum += nll;
      ++steps;
      if (state.step % cfg.log_every == 0) {
        write({fmt_int(state.step), fmt_num(cfg.lr), fmt_num(nll), fmt_num(std::nan(""))});
      }
    }
    const double ev = ar_eval_nll(state.model, eval, cfg.batch_size);
    write({fmt_int(state.step), fmt_num(cfg.lr), fmt_num(std::nan("")), fmt_num(ev)});
    state.epoch = epoch + 1;
    result.epochs.push_back({epoch, state.step, sum / steps, ev});
    if (!ckpt_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ibqa", state.epoch);
      result.last_checkpoint = ckpt_dir / name;
      save_ar_state(result.last_checkpoint, state);
    }
  }
  return result;
}

}  // namespace ibq
