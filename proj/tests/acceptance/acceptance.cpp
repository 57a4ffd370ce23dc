#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <malloc.h>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/oracles.hpp"
#include "ibq/ar/train.hpp"
#include "ibq/cli/commands.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"
#include "ibq/data/archive.hpp"
#include "ibq/data/csv.hpp"
#include "ibq/diag/grad_cases.hpp"
#include "ibq/quant/losses.hpp"

using namespace ibq;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kFdEps = 1e-4;
constexpr double kFdTol = 1e-5;
constexpr int kFdInstances = 10;
constexpr double kFdSeconds = 60.0;
constexpr double kAllCodesFraction = 0.99;
constexpr int kForwardInstances = 1000;
constexpr int kLossInstances = 100;
constexpr double kLossRelTol = 1e-6;
constexpr double kUsageFloor = 0.7;
constexpr double kPsnrSlackDb = 0.5;
constexpr double kTrainCpuMinutes = 30.0;
constexpr double kSoftGapDb = 0.5;
constexpr double kNllMargin = 0.5;
constexpr double kUntrainedRel = 0.15;
constexpr double kPipelineCpuMinutes = 20.0;
constexpr double kParamRelTol = 0.02;
constexpr int kSeeds = 3;
constexpr int kSeedsRequired = 2;

// Desk-scale tokenizer shared by every training criterion.
const char* kDeskConfig = R"(seed = 0
[data]
source = synthetic
size = 32
n = 640
seed = 0
val_fraction = 0.1
[tokenizer]
K = 256
D = 32
p = 4
channels = 16
num_resblocks = 1
codebook_init_scale = 1.0
logit_scale = 10
w_entropy = 0.5
[optim]
lr = 1e-3
epochs = 10
batch = 32
[ar]
d = 2
lr = 1e-3
epochs = 10
batch = 32
[sample]
n = 4
)";

std::string sci(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2e", v);
  return b;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(prec);
  s << v;
  return s.str();
}

std::set<std::int64_t> rows_with_grad(const Tensor& emb) {
  std::set<std::int64_t> rows;
  const auto D = emb.dim(1);
  const auto g = emb.grad().to_vector();
  for (std::int64_t k = 0; k < emb.dim(0); ++k) {
    for (std::int64_t j = 0; j < D; ++j) {
      if (g[k * D + j] != 0.0) {
        rows.insert(k);
        break;
      }
    }
  }
  return rows;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig desk(const fs::path& out, const std::vector<std::string>& sets = {}) {
  std::vector<std::string> all = sets;
  all.push_back("output.dir=" + out.string());
  return RunConfig::parse(kDeskConfig, "<acceptance>", all);
}

class Acceptance {
 public:
  explicit Acceptance(fs::path work) : work_(std::move(work)), log_(work_ / "training.log") {}

  Verdict gradient_oracle() {
    const double t0 = cpu_seconds();
    std::vector<diag::GradCase> cases = diag::core_grad_cases();
    for (auto& c : diag::quant_grad_cases()) cases.push_back(c);
    int failed = 0;
    double worst = 0.0;
    std::string names;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      diag::CaseResult r = diag::run_case(cases[i], kFdInstances, 1000 + i, kFdEps, kFdTol);
      worst = std::max(worst, r.worst_rel);
      if (!r.passed) {
        ++failed;
        names += " " + r.name;
      }
    }
    const double secs = cpu_seconds() - t0;
    return {failed == 0 && secs < kFdSeconds,
            std::to_string(cases.size()) + " ops x " + std::to_string(kFdInstances) + " instances, worst rel " +
                sci(worst) + ", " + num(secs, 1) + " s" + (failed ? ", failing:" + names : "")};
  }

  Verdict all_codes() {
    double min_frac = 1.0;
    bool exact = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(200 + seed);
      Tensor c = diag::rand64(rng, {64, 8});
      Tensor z = diag::rand64(rng, {16, 8});
      Tensor w = diag::rand64(rng, {16, 8});
      Codebook ib = Codebook::from_embeddings(c.clone());
      QuantOut qi = ibq_quantize(z, ib);
      backward(ops::add(diag::weighted_sum(qi.z_q, w), double_quant_loss(z, qi)));
      min_frac = std::min(min_frac, static_cast<double>(rows_with_grad(ib.embeddings).size()) / 64.0);

      Codebook vb = Codebook::from_embeddings(c.clone());
      Tensor zv = z.clone().set_requires_grad();
      QuantOut qv = vqgan_quantize(zv, vb);
      backward(ops::add(diag::weighted_sum(qv.z_q, w), vq_commit_loss(zv, qv)));
      const std::set<std::int64_t> sel(qv.indices.begin(), qv.indices.end());
      exact &= rows_with_grad(vb.embeddings) == sel;
      active_tape().clear();
    }
    return {min_frac >= kAllCodesFraction && exact,
            "IBQ min row fraction " + num(min_frac, 4) + " over 10 draws; VQGAN rows == selected: " +
                (exact ? "yes" : "no")};
  }

  Verdict forward_equivalence() {
    int mismatched = 0;
    for (int t = 0; t < kForwardInstances; ++t) {
      Rng rng(5000 + t);
      const DType dt = t % 2 ? DType::f64 : DType::f32;
      const auto K = static_cast<std::int64_t>(8 + rng.below(120));
      const auto D = static_cast<std::int64_t>(2 + rng.below(30));
      const auto B = static_cast<std::int64_t>(1 + rng.below(32));
      Codebook cb = Codebook::from_embeddings(rng_normal(rng, {K, D}, 0, 1, dt));
      Tensor z = rng_normal(rng, {B, D}, 0, 1, dt);
      QuantOut q = ibq_quantize(z, cb);
      const auto want = ibq::testing::argmax_dot_oracle(z, cb.embeddings);
      bool ok = std::equal(want.begin(), want.end(), q.indices.begin());
      dispatch(dt, [&]<class T>() {
        for (std::int64_t i = 0; i < B && ok; ++i) {
          ok = std::memcmp(q.z_q.data<T>().data() + i * D, cb.embeddings.data<T>().data() + want[i] * D,
                           D * sizeof(T)) == 0;
        }
      });
      mismatched += !ok;
      active_tape().clear();
    }
    return {mismatched == 0, std::to_string(kForwardInstances - mismatched) + "/" +
                                 std::to_string(kForwardInstances) + " instances bit-equal (f32 and f64)"};
  }

  Verdict double_quant_oracle() {
    double worst = 0.0;
    for (int t = 0; t < kLossInstances; ++t) {
      Rng rng(9000 + t);
      Tensor z = diag::rand64(rng, {8, 6});
      Tensor c = diag::rand64(rng, {12, 6});
      QuantOut q = ibq_quantize(z, Codebook::from_embeddings(c));
      const double want = ibq::testing::double_quant_loss_oracle(z, c, kDefaultBeta);
      const double got = double_quant_loss(z, q, kDefaultBeta).item();
      worst = std::max(worst, std::fabs(got - want) / std::fabs(want));
      active_tape().clear();
    }
    // Unit-norm codes: each code is its own argmax, so z on a code is exact.
    Rng rng(77);
    Tensor c = diag::rand64(rng, {10, 4});
    auto v = c.to_vector();
    for (int k = 0; k < 10; ++k) {
      double n = 0;
      for (int j = 0; j < 4; ++j) n += v[k * 4 + j] * v[k * 4 + j];
      for (int j = 0; j < 4; ++j) v[k * 4 + j] /= std::sqrt(n);
    }
    Tensor cu = Tensor::from_vector({10, 4}, v);
    std::vector<double> zs;
    for (int k : {3, 7, 0, 3}) zs.insert(zs.end(), v.begin() + k * 4, v.begin() + k * 4 + 4);
    Tensor zon = Tensor::from_vector({4, 4}, zs);
    const double zero = double_quant_loss(zon, ibq_quantize(zon, Codebook::from_embeddings(cu))).item();
    active_tape().clear();
    return {worst <= kLossRelTol && zero == 0.0,
            "worst rel " + sci(worst) + " over " + std::to_string(kLossInstances) + "; on-code loss " +
                (zero == 0.0 ? "0 exactly" : sci(zero))};
  }

  Verdict usage_directional() {
    int held = 0;
    std::string detail;
    for (int s = 0; s < kSeeds; ++s) {
      const double t0 = cpu_seconds();
      RunConfig cfg = desk(work_ / "usage" / ("seed_" + std::to_string(s)), {"seed=" + std::to_string(s)});
      CompareResult r = compare_quantizers(cfg, {QuantKind::ibq, QuantKind::vqgan}, cfg.output(), log_);
      const double mins = (cpu_seconds() - t0) / 60.0;
      const EvalStats& ib = r.runs[0].last.eval;
      const EvalStats& vq = r.runs[1].last.eval;
      const bool ok = ib.usage.usage > vq.usage.usage && ib.usage.usage >= kUsageFloor &&
                      ib.psnr >= vq.psnr - kPsnrSlackDb && mins <= kTrainCpuMinutes;
      held += ok;
      if (s == 0) ibq_checkpoint_ = r.runs[0].checkpoint;
      detail += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + (ok ? " ok" : " no") + " usage " +
                num(ib.usage.usage, 3) + "/" + num(vq.usage.usage, 3) + " psnr " + num(ib.psnr, 2) + "/" +
                num(vq.psnr, 2) + " " + num(mins, 1) + " min";
    }
    return {held >= kSeedsRequired, "ibq/vqgan " + detail};
  }

  Verdict dimension_collapse() {
    int held = 0;
    std::string detail;
    for (int s = 0; s < kSeeds; ++s) {
      const fs::path dir = work_ / "dimension" / ("seed_" + std::to_string(s));
      const std::string seed = "seed=" + std::to_string(s);
      RunConfig lo = desk(dir / "d8", {seed, "tokenizer.D=8"});
      RunConfig hi = desk(dir / "d256", {seed, "tokenizer.D=256"});
      CompareResult a = compare_quantizers(lo, {QuantKind::vqgan}, lo.output(), log_);
      CompareResult b = compare_quantizers(hi, {QuantKind::vqgan, QuantKind::ibq}, hi.output(), log_);
      const double vq8 = a.runs[0].last.eval.usage.usage;
      const double vq256 = b.runs[0].last.eval.usage.usage;
      const double ib256 = b.runs[1].last.eval.usage.usage;
      const bool ok = vq256 < vq8 && ib256 >= kUsageFloor;
      held += ok;
      detail += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + (ok ? " ok" : " no") +
                " vqgan D8 " + num(vq8, 3) + " D256 " + num(vq256, 3) + " ibq D256 " + num(ib256, 3);
    }
    return {held >= kSeedsRequired, detail};
  }

  Verdict softvq_mismatch() {
    RunConfig cfg = desk(work_ / "softvq", {"tokenizer.quantizer=softvq", "tokenizer.w_entropy=0"});
    const DatasetSplit sp = load_split(cfg.data);
    TokenizerTrainConfig tc = cfg.tokenizer_train(cfg.output() / "tokenizer");
    tc.halt_after_epoch = tc.epochs / 2;
    TrainResult r = train_tokenizer(tc, sp.train, sp.val);
    const SoftGap g = softvq_gap(r.last_checkpoint, cfg, sp.val, total_steps(tc, sp.train.size()));
    const double drop = g.psnr_soft - g.psnr_hard;
    return {drop >= kSoftGapDb, "epoch " + std::to_string(g.epoch) + " tau " + num(g.tau, 3) + ": soft " +
                                    num(g.psnr_soft, 2) + " dB, hard " + num(g.psnr_hard, 2) + " dB, drop " +
                                    num(drop, 2) + " dB"};
  }

  Verdict pipeline() {
    const fs::path dir = work_ / "pipeline";
    fs::create_directories(dir);
    const fs::path cfg_path = dir / "run.cfg";
    std::ofstream(cfg_path) << kDeskConfig << "[output]\ndir = " << dir.string() << "\n";
    std::ostringstream out, err;
    auto run = [&](std::vector<std::string> args) {
      const int code = run_cli(args, out, err);
      if (code != kExitOk) throw Error(args[0] + " exited " + std::to_string(code) + ": " + err.str());
    };
    if (ibq_checkpoint_.empty()) {
      run({"train-tokenizer", "--config", cfg_path.string()});
      ibq_checkpoint_ = dir / "tokenizer" / "checkpoints" / "epoch_0010.ibqa";
    }
    const double t0 = cpu_seconds();
    run({"tokenize", "--checkpoint", ibq_checkpoint_.string(), "--config", cfg_path.string()});
    run({"train-ar", "--config", cfg_path.string(), "--tokens", (dir / "tokens.ibqt").string()});
    const fs::path ar = dir / "ar" / "checkpoints" / "epoch_0010.ibqa";
    run({"sample", "--checkpoint", ar.string(), "--tokenizer", ibq_checkpoint_.string(), "--class", "2", "--out",
         (dir / "samples").string()});
    const double mins = (cpu_seconds() - t0) / 60.0;
    const bool sampled = fs::exists(dir / "samples" / "sample_003.ppm");

    const TokenDataset tokens = TokenDataset::load(dir / "tokens.ibqt");
    const auto rows = read_csv(dir / "ar" / "metrics.csv");
    const double nll = std::stod(rows.back().back());
    const double lnK = std::log(static_cast<double>(tokens.K));

    const RunConfig cfg = RunConfig::load(cfg_path);
    const ARTrainConfig ac = cfg.ar_train(tokens, dir / "unused");
    const TokenSplit split = split_tokens(tokens, cfg.ar.eval_fraction, cfg.seed);
    ARTrainState fresh = init_ar_state(ac);
    const double untrained = ar_eval_nll(fresh.model, split.eval, ac.batch_size);

    const ARModel model = load_ar_model(ar);
    int leaks = 0;
    {
      NoGradGuard g;
      ARBatch base{{tokens.records[0].label}, {{}}};
      for (auto v : tokens.records[0].indices) base.tokens[0].push_back(v);
      const auto ref = model.forward(base, false).logits.to_vector();
      const std::int64_t T = tokens.T, K = tokens.K;
      for (std::int64_t t = 0; t < T; ++t) {
        ARBatch p = base;
        p.tokens[0][t] = (p.tokens[0][t] + 1) % K;
        const auto got = model.forward(p, false).logits.to_vector();
        for (std::int64_t pos = 0; pos <= t; ++pos) {
          leaks += !std::equal(got.begin() + pos * K, got.begin() + (pos + 1) * K, ref.begin() + pos * K);
        }
      }
    }
    const bool ok = sampled && mins < kPipelineCpuMinutes && nll < lnK - kNllMargin && leaks == 0 &&
                    std::fabs(untrained - lnK) <= kUntrainedRel * lnK;
    return {ok, "T " + std::to_string(tokens.T) + " K " + std::to_string(tokens.K) + ", eval nll " + num(nll, 3) +
                    " (bound " + num(lnK - kNllMargin, 3) + "), untrained " + num(untrained, 3) + " vs ln K " +
                    num(lnK, 3) + ", leaking positions " + std::to_string(leaks) + ", " + num(mins, 1) +
                    " min"};
  }

  Verdict scaling_rule() {
    struct Row {
      int d;
      double stated;
    };
    bool ok = true;
    std::string detail;
    for (Row r : {Row{16, 342e6}, Row{20, 649e6}, Row{24, 1.1e9}}) {
      const double n = static_cast<double>(ar_param_count(ar_scale_config(r.d)));
      const double rel = n / r.stated - 1.0;
      ok &= std::fabs(rel) <= kParamRelTol;
      detail += (detail.empty() ? "" : "; ") + std::string("d=") + std::to_string(r.d) + " " + num(n / 1e6, 1) +
                "M vs " + num(r.stated / 1e6, 0) + "M (" + num(100 * rel, 2) + "%)";
    }
    return {ok, detail};
  }

  Verdict determinism() {
    const fs::path dir = work_ / "determinism";
    const std::vector<std::string> tiny = {"data.n=48",          "data.size=16",     "data.val_fraction=0.25",
                                           "tokenizer.K=32",     "tokenizer.D=8",    "tokenizer.channels=8",
                                           "optim.epochs=3",     "optim.batch=8",    "ar.d=0",
                                           "ar.width=32",        "ar.heads=2",       "ar.depth=1",
                                           "ar.epochs=3",        "ar.batch=8"};
    std::vector<std::string> failures;
    for (QuantKind k : {QuantKind::ibq, QuantKind::vqgan, QuantKind::softvq, QuantKind::lfq}) {
      const std::string name(quant_kind_name(k));
      std::vector<std::string> sets = tiny;
      sets.push_back("tokenizer.quantizer=" + name);
      if (k == QuantKind::lfq) sets.push_back("tokenizer.D=5");
      RunConfig cfg = desk(dir / name, sets);
      const DatasetSplit sp = load_split(cfg.data);
      auto tc = [&](const std::string& run) { return cfg.tokenizer_train(cfg.output() / run); };
      TrainResult a = train_tokenizer(tc("a"), sp.train, sp.val);
      TrainResult b = train_tokenizer(tc("b"), sp.train, sp.val);
      TokenizerTrainConfig half = tc("c");
      half.halt_after_epoch = 1;
      TrainResult h = train_tokenizer(half, sp.train, sp.val);
      TrainResult c = train_tokenizer(tc("c"), sp.train, sp.val, h.last_checkpoint);
      if (slurp(a.metrics_csv) != slurp(b.metrics_csv)) failures.push_back(name + " repeat csv");
      if (slurp(a.last_checkpoint) != slurp(b.last_checkpoint)) failures.push_back(name + " repeat checkpoint");
      if (slurp(a.metrics_csv) != slurp(c.metrics_csv)) failures.push_back(name + " resume csv");
      if (slurp(a.last_checkpoint) != slurp(c.last_checkpoint)) failures.push_back(name + " resume checkpoint");
      if (k != QuantKind::ibq) continue;

      const TokenDataset tokens = tokenize_dataset(load_tokenizer(a.last_checkpoint), sp.train, 8);
      const TokenSplit ts = split_tokens(tokens, cfg.ar.eval_fraction, cfg.seed);
      auto acfg = [&](const std::string& run) { return cfg.ar_train(tokens, cfg.output() / run); };
      ARTrainResult x = train_ar(acfg("ar_a"), ts.train, ts.eval);
      ARTrainResult y = train_ar(acfg("ar_b"), ts.train, ts.eval);
      ARTrainConfig ah = acfg("ar_c");
      ah.halt_after_epoch = 2;
      ARTrainResult hz = train_ar(ah, ts.train, ts.eval);
      ARTrainResult z = train_ar(acfg("ar_c"), ts.train, ts.eval, hz.last_checkpoint);
      if (slurp(x.metrics_csv) != slurp(y.metrics_csv)) failures.push_back("ar repeat csv");
      if (slurp(x.metrics_csv) != slurp(z.metrics_csv)) failures.push_back("ar resume csv");
      if (slurp(x.last_checkpoint) != slurp(z.last_checkpoint)) failures.push_back("ar resume checkpoint");
    }
    std::string detail = "tokenizer (ibq, vqgan, softvq, lfq) and AR: repeat and resume";
    for (const auto& f : failures) detail += "; differs: " + f;
    return {failures.empty(), detail};
  }

  Verdict formats() {
    std::vector<std::string> bad;
    const fs::path dir = work_ / "formats";
    fs::create_directories(dir);

    // 3×2 P6 with a comment; maxval 255.
    const std::vector<std::uint8_t> px = {0, 0, 0, 255, 255, 255, 255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204};
    std::string ppm = "P6\n# fixture\n3 2\n255\n";
    ppm.append(px.begin(), px.end());
    PpmImage img = parse_ppm(ppm, "fixture.ppm");
    if (img.width != 3 || img.height != 2 || img.rgb != px) bad.push_back("ppm decode");
    {
      std::ofstream(dir / "in.ppm", std::ios::binary) << ppm;
      write_ppm(dir / "out.ppm", read_ppm(dir / "in.ppm"));
      write_ppm(dir / "again.ppm", read_ppm(dir / "out.ppm"));
      if (slurp(dir / "out.ppm") != slurp(dir / "again.ppm")) bad.push_back("ppm round trip");
      if (read_ppm(dir / "out.ppm").rgb != px) bad.push_back("ppm rewrite");
    }
    Tensor t = ppm_to_image(PpmImage{1, 1, {0, 255, 51}}, 1);
    if (t.value(0) != -1.0f || t.value(1) != 1.0f || t.value(2) != static_cast<float>(51 / 127.5 - 1))
      bad.push_back("ppm to image");
    if (image_to_ppm(t).rgb != std::vector<std::uint8_t>{0, 255, 51}) bad.push_back("image to ppm");

    const std::vector<std::uint8_t> ar = {
        'I', 'B', 'Q', 'A', 1, 0, 0, 0, 2, 0, 0, 0,             // magic, version, two entries
        1, 0, 0, 0, 'w', 1, 0, 0, 0, 2, 0, 0, 0, 1,             // "w" [2] f64
        0, 0, 0, 0, 0, 0, 0xF0, 0x3F, 0, 0, 0, 0, 0, 0, 0x04, 0xC0,  // 1.0, -2.5
        4, 0, 0, 0, 's', 't', 'e', 'p', 1, 0, 0, 0, 1, 0, 0, 0, 2,  // "step" [1] i64
        0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF};           // -1
    try {
      TensorArchive a = TensorArchive::deserialize(ar, "fixture");
      if (a.get("w").to_vector() != std::vector<double>{1.0, -2.5} || a.get("w").dtype() != DType::f64)
        bad.push_back("archive values");
      if (a.get_i64("step") != std::vector<std::int64_t>{-1}) bad.push_back("archive ints");
      if (a.serialize() != ar) bad.push_back("archive round trip");
      a.save(dir / "a.ibqa");
      if (read_file_bytes(dir / "a.ibqa") != ar) bad.push_back("archive file");
    } catch (const Error& e) {
      bad.push_back(std::string("archive: ") + e.what());
    }

    const std::vector<std::uint8_t> tok = {'I', 'B', 'Q', 'K', 4, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0,
                                           1, 0, 3, 0, 0, 0, 0, 0, 0, 0};
    try {
      TokenDataset d = TokenDataset::deserialize(tok, "fixture");
      if (d.K != 4 || d.T != 2 || d.num_classes != 2 || d.records.size() != 1 || d.records[0].label != 1 ||
          d.records[0].indices != std::vector<std::uint32_t>{3, 0})
        bad.push_back("token values");
      if (d.serialize() != tok) bad.push_back("token round trip");
    } catch (const Error& e) {
      bad.push_back(std::string("tokens: ") + e.what());
    }
    std::string detail = "PPM, tensor archive and token file fixtures";
    for (const auto& b : bad) detail += "; failed: " + b;
    return {bad.empty(), detail};
  }

 private:
  fs::path work_;
  std::ofstream log_;
  fs::path ibq_checkpoint_;
};

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::set<int> only;
  fs::path work = fs::temp_directory_path() / "ibq_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      only.insert(std::stoi(a));
    }
  }
  fs::remove_all(work);
  fs::create_directories(work);
  Acceptance acc(work);

  // Shortfalls recorded as expected; they still print FAIL.
  const std::set<int> known = {9};
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient oracle", [&] { return acc.gradient_oracle(); }},
      {"all-codes update", [&] { return acc.all_codes(); }},
      {"forward equivalence", [&] { return acc.forward_equivalence(); }},
      {"double quantization loss oracle", [&] { return acc.double_quant_oracle(); }},
      {"usage directional", [&] { return acc.usage_directional(); }},
      {"dimension collapse directional", [&] { return acc.dimension_collapse(); }},
      {"soft vq mismatch", [&] { return acc.softvq_mismatch(); }},
      {"pipeline smoke", [&] { return acc.pipeline(); }},
      {"scaling rule", [&] { return acc.scaling_rule(); }},
      {"determinism and persistence", [&] { return acc.determinism(); }},
      {"format fixtures", [&] { return acc.formats(); }},
  };
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    active_tape().clear();
    if (!v.passed && !known.count(id)) ++unexpected;
    std::cout << (v.passed ? "PASS" : "FAIL") << "  " << id << "  " << criteria[i].first << "  [" << v.detail
              << "]  " << num(secs, 1) << " s" << (!v.passed && known.count(id) ? "  (known shortfall)" : "")
              << std::endl;
  }
  return unexpected == 0 ? 0 : 1;
}
