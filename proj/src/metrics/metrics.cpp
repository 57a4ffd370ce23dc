#include "ibq/metrics/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>

namespace ibq {

UsageAccumulator::UsageAccumulator(std::int64_t K) {
  if (K < 1) throw ContractError("usage accumulator needs K >= 1");
  counts_.assign(static_cast<std::size_t>(K), 0);
}

void UsageAccumulator::add(const IndexVec& indices) {
  for (std::int64_t i : indices) {
    if (i < 0 || i >= K()) {
      throw DataError("code index " + std::to_string(i) + " outside [0, " + std::to_string(K()) +
                      ")");
    }
  }
  for (std::int64_t i : indices) ++counts_[static_cast<std::size_t>(i)];
  total_ += static_cast<std::int64_t>(indices.size());
}

void UsageAccumulator::merge(const UsageAccumulator& other) {
  if (other.K() != K()) throw DimensionError("cannot merge usage counts of different K");
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  total_ += other.total_;
}

UsageStats UsageAccumulator::stats() const {
  if (total_ == 0) throw ContractError("codebook usage over an empty evaluation set");
  UsageStats s;
  s.counts = counts_;
  s.total = total_;
  std::int64_t used = 0;
  double h = 0.0;
  for (std::int64_t c : counts_) {
    if (c == 0) continue;
    ++used;
    const double p = static_cast<double>(c) / static_cast<double>(total_);
    h -= p * std::log(p);
  }
  s.usage = static_cast<double>(used) / static_cast<double>(K());
  s.perplexity = std::exp(h);
  return s;
}

UsageStats codebook_usage(const IndexVec& indices, std::int64_t K) {
  UsageAccumulator acc(K);
  acc.add(indices);
  return acc.stats();
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
  double s = 0.0;
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = a.value(i) - b.value(i);
    s += d * d;
  }
  return s / static_cast<double>(n);
}

double psnr_from_mse(double mse) {
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(kPixelPeak * kPixelPeak / mse);
}

double psnr(const Tensor& x_hat, const Tensor& x) {
  return psnr_from_mse(mean_squared_error(x_hat, x));
}

double distribution_gap(const Tensor& codebook, const Tensor& features) {
  if (codebook.rank() != 2 || features.rank() != 2 || codebook.dim(1) != features.dim(1)) {
    throw DimensionError("distribution_gap: codebook " + shape_str(codebook.shape()) +
                         " and features " + shape_str(features.shape()) + " must share D");
  }
  const std::int64_t K = codebook.dim(0), N = features.dim(0), D = codebook.dim(1);
  const std::vector<double> c = codebook.to_vector();
  const std::vector<double> f = features.to_vector();
  double norm_sum = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    double s = 0;
    for (std::int64_t j = 0; j < D; ++j) s += f[n * D + j] * f[n * D + j];
    norm_sum += std::sqrt(s);
  }
  const double mean_norm = norm_sum / static_cast<double>(N);
  if (mean_norm == 0.0) throw DomainError("distribution_gap: features have zero mean norm");
  double gap = 0.0;
  for (std::int64_t k = 0; k < K; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t n = 0; n < N; ++n) {
      double s = 0;
      for (std::int64_t j = 0; j < D; ++j) {
        const double d = c[k * D + j] - f[n * D + j];
        s += d * d;
      }
      best = std::min(best, s);
    }
    gap += std::sqrt(best);
  }
  return gap / static_cast<double>(K) / mean_norm;
}

void export_embeddings_csv(const Tensor& codebook, const Tensor& features,
                           const std::filesystem::path& path) {
  if (codebook.rank() != 2 || features.rank() != 2 || codebook.dim(1) != features.dim(1)) {
    throw DimensionError("export_embeddings_csv: codebook and features must share D");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::int64_t D = codebook.dim(1);
  out << "source";
  for (std::int64_t j = 0; j < D; ++j) out << ",d" << j;
  out << '\n';
  char buf[32];
  auto rows = [&](const Tensor& t, const char* label) {
    for (std::int64_t i = 0; i < t.dim(0); ++i) {
      out << label;
      for (std::int64_t j = 0; j < D; ++j) {
        std::snprintf(buf, sizeof buf, "%.9g", t.value(i * D + j));
        out << ',' << buf;
      }
      out << '\n';
    }
  };
  rows(codebook, "code");
  rows(features, "feature");
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ibq
