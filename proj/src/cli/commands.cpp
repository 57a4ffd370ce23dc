#include "ibq/cli/commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "ibq/core/errors.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"
#include "ibq/data/csv.hpp"
#include "ibq/diag/quantcheck.hpp"

namespace ibq {
namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "run config (INI)");
  if (config_required) opt->required();
  cmd->add_option("--set", c.sets, "override a config key, section.key=value");
  cmd->add_option("--seed", c.seed, "global seed; replaces the config value");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = RunConfig::load(c.config, c.sets);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.deterministic = true;
  }
  cfg.resolve_seed();
  return cfg;
}

std::string fixed(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string epoch_line(const EpochSummary& e) {
  return "epoch " + std::to_string(e.epoch + 1) + "  step " + std::to_string(e.step) + "  loss " +
         fixed(e.eval.total) + "  recon " + fixed(e.eval.recon) + "  usage " + fixed(e.eval.usage.usage, 3) +
         "  ppl " + fixed(e.eval.usage.perplexity, 1) + "  psnr " + fixed(e.eval.psnr, 2);
}

std::vector<QuantKind> parse_kinds(const std::string& list) {
  std::vector<QuantKind> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_quant_kind(item));
  }
  if (out.empty()) throw ConfigError("--quantizers lists no quantizer");
  return out;
}

void check_data(const RunConfig& cfg) {
  if (cfg.data.source == "folder" && !fs::is_directory(cfg.data.path)) {
    throw DataError("data path " + cfg.data.path.string() + " does not exist or is not a directory");
  }
}

const ImageDataset& pick_split(const DatasetSplit& sp, const ImageDataset& all, const std::string& which) {
  if (which == "val") return sp.val;
  if (which == "train") return sp.train;
  if (which == "all") return all;
  throw ConfigError("--split must be val, train or all, got '" + which + "'");
}

void require_image_size(const TokenizerModel& m, const RunConfig& cfg, const fs::path& ckpt) {
  if (m.config().image_size != cfg.data.size) {
    throw ConfigError("checkpoint " + ckpt.string() + " expects " + std::to_string(m.config().image_size) +
                      "px images but data.size = " + std::to_string(cfg.data.size));
  }
}

int cmd_train_tokenizer(const Common& c, const std::optional<std::string>& resume, std::ostream& out) {
  RunConfig cfg = resolve(c);
  const fs::path dir = cfg.output() / "tokenizer";
  TokenizerTrainConfig tc = cfg.tokenizer_train(dir);
  if (c.dry_run) {
    check_data(cfg);
    out << "config ok\n"
        << "tokenizer parameters: " << tokenizer_param_count(tc.model) << "\n"
        << "tokens per image: " << tc.model.tokens_per_image() << "  vocabulary: " << tc.model.vocab() << "\n";
    return kExitOk;
  }
  DatasetSplit sp = load_split(cfg.data);
  echo_config(cfg, dir);
  std::optional<fs::path> from;
  if (resume) from = *resume;
  TrainResult r = train_tokenizer(tc, sp.train, sp.val, from);
  for (const auto& e : r.epochs) out << epoch_line(e) << "\n";
  out << "checkpoint " << r.last_checkpoint.string() << "\nmetrics " << r.metrics_csv.string() << "\n";
  return kExitOk;
}

int cmd_compare(const Common& c, const std::string& list, std::ostream& out) {
  RunConfig cfg = resolve(c);
  const auto kinds = parse_kinds(list);
  const fs::path dir = cfg.output() / "compare";
  if (c.dry_run) {
    check_data(cfg);
    for (QuantKind k : kinds) {
      TokenizerTrainConfig tc = cfg.tokenizer_train({});
      tc.model.quantizer = k;
      tc.validate();
      out << quant_kind_name(k) << ": " << tokenizer_param_count(tc.model) << " parameters\n";
    }
    return kExitOk;
  }
  echo_config(cfg, dir);
  CompareResult r = compare_quantizers(cfg, kinds, dir, out);
  out << "\nquantizer  usage   ppl     psnr    loss\n";
  for (const auto& s : r.runs) {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %-7.3f %-7.1f %-7.2f %.4f\n", std::string(quant_kind_name(s.quantizer)).c_str(),
                  s.last.eval.usage.usage, s.last.eval.usage.perplexity, s.last.eval.psnr, s.last.eval.total);
    out << line;
  }
  if (r.softvq_gap) {
    const SoftGap& g = *r.softvq_gap;
    out << "softvq epoch " << g.epoch << " (tau " << fixed(g.tau, 4) << "): psnr soft " << fixed(g.psnr_soft, 2)
        << "  hard " << fixed(g.psnr_hard, 2) << "  drop " << fixed(g.psnr_soft - g.psnr_hard, 2) << " dB\n";
  }
  out << "combined csv " << r.csv.string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const Common& c, const std::string& split, const std::string& out_dir,
             std::ostream& out) {
  RunConfig cfg = resolve(c);
  TokenizerModel m = load_tokenizer(ckpt);
  require_image_size(m, cfg, ckpt);
  TokenizerTrainConfig tc = cfg.tokenizer_train({});
  tc.model = m.config();
  const ImageDataset all = load_images(cfg.data);
  const DatasetSplit sp = split_dataset(all, cfg.data.val_fraction, cfg.data.seed);
  const ImageDataset& ds = pick_split(sp, all, split);
  EvalStats e = evaluate_tokenizer(m, ds, tc.batch_size, {false, kSoftVqTauEnd}, tc);

  const fs::path dir = out_dir.empty() ? cfg.output() / "eval" : fs::path(out_dir);
  fs::create_directories(dir);
  TokenDataset tokens = tokenize_dataset(m, ds, tc.batch_size);
  {
    std::ofstream idx(dir / "indices.txt", std::ios::binary);
    for (const auto& rec : tokens.records) {
      for (std::size_t i = 0; i < rec.indices.size(); ++i) idx << (i ? " " : "") << rec.indices[i];
      idx << "\n";
    }
    if (!idx) throw IoError("cannot write " + (dir / "indices.txt").string());
  }
  double gap = 0.0;
  const bool has_gap = m.config().quantizer != QuantKind::lfq;
  {
    NoGradGuard guard;
    const std::int64_t n = std::min<std::int64_t>(16, ds.size());
    std::vector<std::int64_t> first(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) first[i] = i;
    Tensor x = ds.batch(first);
    Tensor z = m.encode(x);
    if (has_gap) gap = distribution_gap(m.codebook().embeddings, z);
    Tensor xh = m.decode(m.quantize(z, {false, kSoftVqTauEnd}).z_q, n);
    const std::int64_t S = xh.dim(2);
    auto v = xh.to_vector();
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<double> img(v.begin() + i * 3 * S * S, v.begin() + (i + 1) * 3 * S * S);
      char name[32];
      std::snprintf(name, sizeof name, "recon_%02lld.ppm", static_cast<long long>(i));
      write_ppm(dir / name, image_to_ppm(Tensor::from_vector({3, S, S}, img)));
    }
  }
  out << "images " << ds.size() << " (" << split << ")\n"
      << "psnr " << fixed(e.psnr, 4) << "  mse " << fixed(e.mse, 6) << "\n"
      << "loss " << fixed(e.total, 6) << "  recon " << fixed(e.recon, 6) << "  quant " << fixed(e.quant, 6)
      << "  entropy " << fixed(e.entropy, 6) << "\n"
      << "usage " << fixed(e.usage.usage, 6) << "  perplexity " << fixed(e.usage.perplexity, 3) << "\n"
      << "distribution gap " << (has_gap ? fixed(gap, 6) : std::string("n/a")) << "\n"
      << "outputs " << dir.string() << "\n";
  return kExitOk;
}

int cmd_tokenize(const std::string& ckpt, const Common& c, const std::string& split, const std::string& dest,
                 std::ostream& out) {
  RunConfig cfg = resolve(c);
  TokenizerModel m = load_tokenizer(ckpt);
  require_image_size(m, cfg, ckpt);
  const ImageDataset all = load_images(cfg.data);
  const DatasetSplit sp = split_dataset(all, cfg.data.val_fraction, cfg.data.seed);
  TokenDataset t = tokenize_dataset(m, pick_split(sp, all, split), cfg.batch);
  const fs::path path = dest.empty() ? cfg.output() / "tokens.ibqt" : fs::path(dest);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.save(path);
  out << "tokens " << t.records.size() << " x " << t.T << "  vocabulary " << t.K << "  classes " << t.num_classes
      << "\nwrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_train_ar(const Common& c, const std::string& tokens_path, const std::optional<std::string>& resume,
                 std::ostream& out) {
  RunConfig cfg = resolve(c);
  TokenDataset tokens = TokenDataset::load(tokens_path);
  const fs::path dir = cfg.output() / "ar";
  ARTrainConfig ac = cfg.ar_train(tokens, dir);
  check_ar_compatible(ac.model, tokens);
  if (c.dry_run) {
    out << "config ok\nar parameters: " << ar_param_count(ac.model) << "\n";
    return kExitOk;
  }
  TokenSplit sp = split_tokens(tokens, cfg.ar.eval_fraction, cfg.seed);
  echo_config(cfg, dir);
  std::optional<fs::path> from;
  if (resume) from = *resume;
  ARTrainResult r = train_ar(ac, sp.train, sp.eval, from);
  for (const auto& e : r.epochs) {
    out << "epoch " << e.epoch + 1 << "  step " << e.step << "  nll train " << fixed(e.nll_train) << "  eval "
        << fixed(e.nll_eval) << "\n";
  }
  out << "checkpoint " << r.last_checkpoint.string() << "\nmetrics " << r.metrics_csv.string() << "\n";
  return kExitOk;
}

struct SampleArgs {
  std::string ar_ckpt, tok_ckpt, config, out_dir;
  std::optional<int> label, n, top_k;
  std::optional<double> temperature;
  std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs& a, std::ostream& out) {
  SampleConfig sc;
  fs::path dir = "samples";
  if (!a.config.empty()) {
    RunConfig cfg = RunConfig::load(a.config);
    sc = cfg.sample;
    dir = cfg.output() / "samples";
  }
  if (a.label) sc.label = *a.label;
  if (a.n) sc.n = *a.n;
  if (a.top_k) sc.top_k = *a.top_k;
  if (a.temperature) sc.temperature = *a.temperature;
  if (!a.out_dir.empty()) dir = a.out_dir;
  if (sc.n < 1) throw ConfigError("--n must be positive");

  ARModel ar = load_ar_model(a.ar_ckpt);
  TokenizerModel tok = load_tokenizer(a.tok_ckpt);
  const ARConfig& ac = ar.config();
  if (ac.vocab != tok.config().vocab()) {
    throw ConfigError("vocabulary mismatch: AR checkpoint " + a.ar_ckpt + " has K=" + std::to_string(ac.vocab) +
                      ", tokenizer " + a.tok_ckpt + " has K=" + std::to_string(tok.config().vocab()));
  }
  if (ac.seq_len != tok.config().tokens_per_image()) {
    throw ConfigError("sequence mismatch: AR checkpoint " + a.ar_ckpt + " has T=" + std::to_string(ac.seq_len) +
                      ", tokenizer " + a.tok_ckpt + " emits " + std::to_string(tok.config().tokens_per_image()) +
                      " tokens per image");
  }
  if (sc.label < 0 || sc.label >= ac.num_classes) {
    throw ConfigError("class " + std::to_string(sc.label) + " outside [0, " + std::to_string(ac.num_classes) + ")");
  }
  fs::create_directories(dir);
  Rng rng = Rng(a.seed).fork(0x53414D50);
  SampleOptions opts{sc.temperature, sc.top_k};
  std::ofstream listing(dir / "tokens.txt", std::ios::binary);
  NoGradGuard guard;
  for (int i = 0; i < sc.n; ++i) {
    const auto toks = ar_sample(ar, sc.label, opts, rng);
    for (std::size_t j = 0; j < toks.size(); ++j) listing << (j ? " " : "") << toks[j];
    listing << "\n";
    Tensor img = tok.decode(tok.code_rows(toks), 1);
    const std::int64_t S = img.dim(2);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03d.ppm", i);
    write_ppm(dir / name, image_to_ppm(ops::reshape(img, {3, S, S})));
  }
  if (!listing) throw IoError("cannot write " + (dir / "tokens.txt").string());
  out << "wrote " << sc.n << " samples of class " << sc.label << " to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_quantcheck(std::uint64_t seed, bool corrupt, std::ostream& out) {
  diag::QuantCheckOptions o;
  o.seed = seed;
  o.corrupt_ibq = corrupt;
  diag::QuantCheckReport r = diag::run_quantcheck(o);
  out << r.table();
  out << (r.passed() ? "quantcheck: all checks passed\n" : "quantcheck: FAILED\n");
  return r.passed() ? kExitOk : kExitNumeric;
}

}  // namespace

SoftGap softvq_gap(const fs::path& checkpoint, const RunConfig& cfg, const ImageDataset& val,
                   std::int64_t total) {
  TrainState s = load_train_state(checkpoint);
  TokenizerTrainConfig tc = cfg.tokenizer_train({});
  tc.model = s.model.config();
  SoftGap g;
  g.epoch = s.epoch;
  g.tau = softvq_tau_at(tc, s.step, total);
  g.psnr_soft = evaluate_tokenizer(s.model, val, tc.batch_size, {true, g.tau}, tc).psnr;
  g.psnr_hard = evaluate_tokenizer(s.model, val, tc.batch_size, {false, g.tau}, tc).psnr;
  return g;
}

CompareResult compare_quantizers(const RunConfig& cfg, const std::vector<QuantKind>& kinds, const fs::path& out,
                                 std::ostream& log) {
  DatasetSplit sp = load_split(cfg.data);
  CompareResult res;
  res.csv = out / "compare.csv";
  fs::create_directories(out);
  CsvWriter csv(res.csv, {"quantizer", "epoch", "usage", "perplexity", "psnr", "loss"});
  for (QuantKind k : kinds) {
    const std::string name(quant_kind_name(k));
    const fs::path dir = kinds.size() == 1 ? out : out / name;
    TokenizerTrainConfig tc = cfg.tokenizer_train(dir);
    tc.model.quantizer = k;
    log << "training " << name << "\n";
    TrainResult r = train_tokenizer(tc, sp.train, sp.val);
    for (const auto& e : r.epochs) {
      log << "  " << epoch_line(e) << "\n";
      csv.row({name, std::to_string(e.epoch), fmt_num(e.eval.usage.usage),
               fmt_num(e.eval.usage.perplexity), fmt_num(e.eval.psnr), fmt_num(e.eval.total)});
    }
    res.runs.push_back({k, r.epochs.back(), r.last_checkpoint});
    if (k == QuantKind::softvq) {
      const int mid = std::max(1, tc.epochs / 2);
      char file[32];
      std::snprintf(file, sizeof file, "epoch_%04d.ibqa", mid);
      res.softvq_gap = softvq_gap(dir / "checkpoints" / file, cfg, sp.val, total_steps(tc, sp.train.size()));
    }
  }
  return res;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ibqlab: index-backpropagation quantization experiments"};
  app.require_subcommand(1);

  Common tr;
  std::optional<std::string> tr_resume;
  auto* train = app.add_subcommand("train-tokenizer", "train a visual tokenizer");
  add_common(train, tr);
  train->add_flag("--dry-run", tr.dry_run, "validate the config and print the parameter count");
  train->add_option("--resume", tr_resume, "continue from an epoch checkpoint");

  Common cmp;
  std::string kinds = "ibq,vqgan";
  auto* compare = app.add_subcommand("compare-quantizers", "train several quantizers on the same budget");
  add_common(compare, cmp);
  compare->add_option("--quantizers", kinds, "comma-separated list (ibq, naive, vqgan, lfq, softvq)");
  compare->add_flag("--dry-run", cmp.dry_run, "validate the config only");

  Common ev;
  std::string ev_ckpt, ev_split = "val", ev_out;
  auto* eval = app.add_subcommand("eval-tokenizer", "evaluate a tokenizer checkpoint");
  eval->add_option("--checkpoint", ev_ckpt, "tokenizer checkpoint")->required();
  eval->add_option("--data,--config", ev.config, "run config holding the data section")->required();
  eval->add_option("--set", ev.sets, "override a config key");
  eval->add_option("--split", ev_split, "val, train or all");
  eval->add_option("--out", ev_out, "output directory");

  Common tk;
  std::string tk_ckpt, tk_split = "all", tk_out;
  auto* tokenize = app.add_subcommand("tokenize", "encode a dataset into token sequences");
  tokenize->add_option("--checkpoint", tk_ckpt, "tokenizer checkpoint")->required();
  add_common(tokenize, tk);
  tokenize->add_option("--split", tk_split, "val, train or all");
  tokenize->add_option("--out", tk_out, "token file path");

  Common ar;
  std::string ar_tokens;
  std::optional<std::string> ar_resume;
  auto* train_ar_cmd = app.add_subcommand("train-ar", "train the class-conditional autoregressive model");
  add_common(train_ar_cmd, ar);
  train_ar_cmd->add_option("--tokens", ar_tokens, "token file from `tokenize`")->required();
  train_ar_cmd->add_option("--resume", ar_resume, "continue from an epoch checkpoint");
  train_ar_cmd->add_flag("--dry-run", ar.dry_run, "validate and print the parameter count");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "sample token grids and decode them to images");
  sample->add_option("--checkpoint", sa.ar_ckpt, "AR checkpoint")->required();
  sample->add_option("--tokenizer", sa.tok_ckpt, "tokenizer checkpoint")->required();
  sample->add_option("--config", sa.config, "run config supplying [sample] defaults and the output dir");
  sample->add_option("--class", sa.label, "class label");
  sample->add_option("--n", sa.n, "number of images");
  sample->add_option("--seed", sa.seed, "sampling seed");
  sample->add_option("--top-k", sa.top_k, "keep the k most likely tokens (0: all)");
  sample->add_option("--temperature", sa.temperature, "softmax temperature");
  sample->add_option("--out", sa.out_dir, "output directory");

  std::uint64_t qc_seed = 0;
  bool qc_corrupt = false;
  auto* qc = app.add_subcommand("quantcheck", "gradient-flow diagnostics for every quantizer");
  qc->add_option("--seed", qc_seed, "seed for the random problems");
  qc->add_flag("--corrupt-ibq", qc_corrupt, "negative control: cut the soft adjoint of IBQ");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train_tokenizer(tr, tr_resume, out);
    if (*compare) return cmd_compare(cmp, kinds, out);
    if (*eval) return cmd_eval(ev_ckpt, ev, ev_split, ev_out, out);
    if (*tokenize) return cmd_tokenize(tk_ckpt, tk, tk_split, tk_out, out);
    if (*train_ar_cmd) return cmd_train_ar(ar, ar_tokens, ar_resume, out);
    if (*sample) return cmd_sample(sa, out);
    if (*qc) return cmd_quantcheck(qc_seed, qc_corrupt, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace ibq
