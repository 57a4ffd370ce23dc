#include "ibq/diag/quantcheck.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>

#include "ibq/core/ops.hpp"
#include "ibq/core/tape.hpp"
#include "ibq/diag/grad_cases.hpp"
#include "ibq/quant/losses.hpp"
#include "ibq/quant/quantizers.hpp"

namespace ibq::diag {
namespace {

constexpr std::int64_t kB = 16, kK = 64, kD = 8;

struct Problem {
  Tensor z, c, w;
};

Problem make_problem(Rng& rng, std::int64_t D = kD) {
  return {rand64(rng, {kB, D}), rand64(rng, {kK, D}), rand64(rng, {kB, D})};
}

using QuantFn = std::function<QuantOut(const Tensor&, const Codebook&)>;

std::string num(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

IndexVec argmax_dot(const Tensor& z, const Tensor& c) {
  auto zv = z.to_vector(), cv = c.to_vector();
  const std::int64_t B = z.dim(0), K = c.dim(0), D = c.dim(1);
  IndexVec out(static_cast<std::size_t>(B));
  for (std::int64_t i = 0; i < B; ++i) {
    double best = -INFINITY;
    for (std::int64_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::int64_t j = 0; j < D; ++j) s += zv[i * D + j] * cv[k * D + j];
      if (s > best) best = s, out[i] = k;
    }
  }
  return out;
}

IndexVec nearest(const Tensor& z, const Tensor& c) {
  auto zv = z.to_vector(), cv = c.to_vector();
  const std::int64_t B = z.dim(0), K = c.dim(0), D = c.dim(1);
  IndexVec out(static_cast<std::size_t>(B));
  for (std::int64_t i = 0; i < B; ++i) {
    double best = INFINITY;
    for (std::int64_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::int64_t j = 0; j < D; ++j) s += std::pow(zv[i * D + j] - cv[k * D + j], 2);
      if (s < best) best = s, out[i] = k;
    }
  }
  return out;
}

// Largest |z_q − C[idx]| over all entries.
double row_gap(const Tensor& zq, const Tensor& c, const IndexVec& idx) {
  auto q = zq.to_vector(), cv = c.to_vector();
  const std::int64_t D = c.dim(1);
  double worst = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::int64_t j = 0; j < D; ++j) {
      worst = std::max(worst, std::fabs(q[i * D + j] - cv[idx[i] * D + j]));
    }
  }
  return worst;
}

bool bit_equal_rows(const Tensor& zq, const Tensor& c, const IndexVec& idx) {
  auto q = zq.data<double>(), cv = c.data<double>();
  const std::int64_t D = c.dim(1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (std::memcmp(&q[i * D], &cv[idx[i] * D], sizeof(double) * D) != 0) return false;
  }
  return true;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

std::set<std::int64_t> rows_with_grad(const Tensor& c) {
  std::set<std::int64_t> rows;
  if (!c.has_grad()) return rows;
  auto g = c.grad().to_vector();
  const std::int64_t D = c.dim(1);
  for (std::int64_t k = 0; k < c.dim(0); ++k) {
    for (std::int64_t j = 0; j < D; ++j) {
      if (g[k * D + j] != 0.0) {
        rows.insert(k);
        break;
      }
    }
  }
  return rows;
}

// One backward of Σ w⊙z_q plus the quantizer's own loss; returns the flow record.
QuantFlow flow_of(const std::string& name, const QuantFn& quant, const Problem& p) {
  active_tape().clear();
  Codebook cb = Codebook::from_embeddings(p.c.clone());
  Tensor z = p.z.clone();
  z.set_requires_grad(true);
  QuantOut q = quant(z, cb);
  attach_losses(z, q, kDefaultBeta);
  Tensor loss = weighted_sum(q.z_q, p.w);
  if (q.quant_loss.defined()) loss = ops::add(loss, q.quant_loss);
  backward(loss);
  auto rows = rows_with_grad(cb.embeddings);
  const std::set<std::int64_t> sel(q.indices.begin(), q.indices.end());
  QuantFlow f;
  f.quantizer = name;
  f.rows_with_grad = static_cast<std::int64_t>(rows.size());
  f.rows_selected = static_cast<std::int64_t>(sel.size());
  f.row_fraction = static_cast<double>(rows.size()) / static_cast<double>(kK);
  return f;
}

std::set<std::int64_t> grad_rows(const QuantFn& quant, const Problem& p, IndexVec* selected) {
  active_tape().clear();
  Codebook cb = Codebook::from_embeddings(p.c.clone());
  Tensor z = p.z.clone();
  z.set_requires_grad(true);
  QuantOut q = quant(z, cb);
  attach_losses(z, q, kDefaultBeta);
  Tensor loss = weighted_sum(q.z_q, p.w);
  if (q.quant_loss.defined()) loss = ops::add(loss, q.quant_loss);
  backward(loss);
  *selected = q.indices;
  return rows_with_grad(cb.embeddings);
}

// ∂(Σ w⊙z_q)/∂z through the quantizer alone.
std::vector<double> z_grad(const QuantFn& quant, const Problem& p) {
  active_tape().clear();
  Codebook cb = Codebook::from_embeddings(p.c.clone());
  Tensor z = p.z.clone();
  z.set_requires_grad(true);
  QuantOut q = quant(z, cb);
  backward(weighted_sum(q.z_q, p.w));
  return z.has_grad() ? z.grad().to_vector() : std::vector<double>(p.z.numel(), 0.0);
}

class Runner {
 public:
  explicit Runner(const QuantCheckOptions& o) : opts_(o), rng_(Rng(o.seed).fork(0x5143)) {}

  void add(const std::string& q, const std::string& check, bool ok, std::string detail) {
    report_.rows.push_back({q, check, ok, std::move(detail)});
  }

  void fd(const std::string& q, const std::vector<std::string>& prefixes) {
    int cases = 0;
    double worst = 0;
    bool ok = true;
    std::string failed;
    for (const GradCase& c : quant_grad_cases()) {
      bool match = false;
      for (const auto& pre : prefixes) match |= c.name.rfind(pre, 0) == 0;
      if (!match) continue;
      CaseResult r = run_case(c, opts_.fd_instances, opts_.seed);
      ++cases;
      worst = std::max(worst, r.worst_rel);
      if (!r.passed) {
        ok = false;
        failed += " " + c.name;
      }
    }
    add(q, "finite-diff", ok && cases > 0,
        std::to_string(cases) + " cases, worst rel " + num(worst) + (failed.empty() ? "" : ", failed:" + failed));
  }

  // All rows must carry gradient (global update).
  void all_codes(const std::string& name, const QuantFn& quant) {
    Problem p = make_problem(rng_);
    QuantFlow f = flow_of(name, quant, p);
    report_.flow.push_back(f);
    add(name, "all-codes", f.row_fraction >= 0.99,
        std::to_string(f.rows_with_grad) + "/" + std::to_string(kK) + " rows");
  }

  // Gradient rows must be exactly the selected rows.
  void selected_only(const std::string& name, const QuantFn& quant) {
    Problem p = make_problem(rng_);
    report_.flow.push_back(flow_of(name, quant, p));
    IndexVec sel;
    auto rows = grad_rows(quant, p, &sel);
    const std::set<std::int64_t> want(sel.begin(), sel.end());
    add(name, "selected-only", rows == want,
        std::to_string(rows.size()) + " rows with gradient, " + std::to_string(want.size()) + " selected");
  }

  void run() {
    const bool corrupt = opts_.corrupt_ibq;
    QuantFn ibq = [corrupt](const Tensor& z, const Codebook& cb) {
      IbqOptions o;
      o.corrupt_adjoint = corrupt;
      return ibq_quantize(z, cb, o);
    };
    QuantFn vqgan = [](const Tensor& z, const Codebook& cb) { return vqgan_quantize(z, cb); };
    QuantFn naive = [](const Tensor& z, const Codebook& cb) { return naive_vq_quantize(z, cb); };
    QuantFn soft = [](const Tensor& z, const Codebook& cb) { return softvq_quantize(z, cb, 0.5, true); };
    QuantFn soft_hard = [](const Tensor& z, const Codebook& cb) { return softvq_quantize(z, cb, 0.5, false); };

    {
      Problem p = make_problem(rng_);
      QuantOut q = ibq(p.z, Codebook::from_embeddings(p.c.clone()));
      const IndexVec want = argmax_dot(p.z, p.c);
      add("ibq", "forward", q.indices == want && bit_equal_rows(q.z_q, p.c, want),
          "z_q bit-equals C[argmax z·C]");
      active_tape().clear();
    }
    all_codes("ibq", ibq);
    {
      Problem p = make_problem(rng_);
      auto got = z_grad(ibq, p);
      active_tape().clear();
      Tensor z = p.z.clone();
      z.set_requires_grad(true);
      Tensor c = p.c.clone();
      backward(weighted_sum(ops::matmul(ops::softmax(ops::matmul_nt(z, c)), c), p.w));
      const double gap = max_abs_diff(got, z.grad().to_vector());
      add("ibq", "ste-identity", gap < 1e-12,
          "dz matches soft path, max gap " + num(gap));
    }
    fd("ibq", {"ibq_", "double_quant_loss", "straight_through_index"});

    {
      Problem p = make_problem(rng_);
      QuantOut q = vqgan(p.z, Codebook::from_embeddings(p.c.clone()));
      const IndexVec want = nearest(p.z, p.c);
      const double gap = row_gap(q.z_q, p.c, want);
      add("vqgan", "forward", q.indices == want && gap < 1e-12, "nearest code, max gap " + num(gap));
      active_tape().clear();
      const double g = max_abs_diff(z_grad(vqgan, p), p.w.to_vector());
      add("vqgan", "ste-identity", g == 0.0, "dz = dz_q, max gap " + num(g));
    }
    selected_only("vqgan", vqgan);
    fd("vqgan", {"vqgan_", "vq_commit_loss"});

    {
      Problem p = make_problem(rng_);
      QuantOut q = naive(p.z, Codebook::from_embeddings(p.c.clone()));
      const IndexVec want = nearest(p.z, p.c);
      add("naive", "forward", q.indices == want && bit_equal_rows(q.z_q, p.c, want), "z_q bit-equals nearest code");
      active_tape().clear();
      double g = 0;
      for (double v : z_grad(naive, p)) g = std::max(g, std::fabs(v));
      add("naive", "no-encoder-grad", g == 0.0, "max |dz| " + num(g));
    }
    selected_only("naive", naive);
    fd("naive", {"naive_"});

    {
      Problem p = make_problem(rng_);
      QuantOut q = soft_hard(p.z, Codebook::from_embeddings(p.c.clone()));
      const IndexVec want = nearest(p.z, p.c);
      const double gap = row_gap(q.z_q, p.c, want);
      add("softvq", "forward-hard", q.indices == want && gap < 1e-12, "inference picks nearest, max gap " + num(gap));
      active_tape().clear();
      const double g = max_abs_diff(z_grad(soft_hard, p), p.w.to_vector());
      add("softvq", "ste-identity", g == 0.0, "hard inference dz = dz_q, max gap " + num(g));
    }
    all_codes("softvq", soft);
    fd("softvq", {"softvq_"});

    {
      Problem p = make_problem(rng_, 6);
      Tensor z = p.z.clone();
      QuantOut q = lfq_quantize(z, LfqCodebook{6});
      auto zv = z.to_vector(), qv = q.z_q.to_vector();
      bool ok = true;
      for (std::int64_t i = 0; i < kB; ++i) {
        std::int64_t idx = 0;
        for (int j = 0; j < 6; ++j) {
          const double s = zv[i * 6 + j] > 0 ? 1.0 : -1.0;
          ok &= std::fabs(qv[i * 6 + j] - s) < 1e-12;
          if (s > 0) idx |= std::int64_t{1} << j;
        }
        ok &= q.indices[i] == idx;
      }
      add("lfq", "forward", ok, "sign codes and bit indices");
      active_tape().clear();
      z.set_requires_grad(true);
      QuantOut q2 = lfq_quantize(z, LfqCodebook{6});
      backward(weighted_sum(q2.z_q, p.w));
      const double g = max_abs_diff(z.grad().to_vector(), p.w.to_vector());
      add("lfq", "ste-identity", g == 0.0, "dz = dz_q, max gap " + num(g));
    }
    fd("lfq", {"lfq_"});
  }

  QuantCheckReport take() { return std::move(report_); }

 private:
  QuantCheckOptions opts_;
  Rng rng_;
  QuantCheckReport report_;
};

}  // namespace

bool QuantCheckReport::passed() const {
  for (const auto& r : rows) {
    if (!r.passed) return false;
  }
  return !rows.empty();
}

std::string QuantCheckReport::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-16s %-5s %s\n", "quant", "check", "ok", "detail");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-8s %-16s %-5s %s\n", r.quantizer.c_str(), r.check.c_str(),
                  r.passed ? "PASS" : "FAIL", r.detail.c_str());
    os << line;
  }
  os << "\ncodebook rows receiving gradient\n";
  for (const auto& f : flow) {
    std::snprintf(line, sizeof line, "%-8s %6.4f  (%lld rows, %lld selected)\n", f.quantizer.c_str(),
                  f.row_fraction, static_cast<long long>(f.rows_with_grad),
                  static_cast<long long>(f.rows_selected));
    os << line;
  }
  return os.str();
}

QuantCheckReport run_quantcheck(const QuantCheckOptions& opts) {
  Runner r(opts);
  r.run();
  active_tape().clear();
  return r.take();
}

}  // namespace ibq::diag
