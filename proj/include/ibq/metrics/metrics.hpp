#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ibq/core/tensor.hpp"

namespace ibq {

struct UsageStats {
  std::vector<std::int64_t> counts;
  std::int64_t total = 0;
  double usage = 0.0;       // |{k : count_k > 0}| / K
  double perplexity = 0.0;  // exp(H(counts / total))
};

// Per-code selection counts over one evaluation pass. Merging is
// associative and order-independent.
class UsageAccumulator {
 public:
  explicit UsageAccumulator(std::int64_t K);

  // Throws DataError on an index outside [0, K).
  void add(const IndexVec& indices);
  void merge(const UsageAccumulator& other);
  // Throws ContractError when no index was added.
  UsageStats stats() const;
  std::int64_t K() const { return static_cast<std::int64_t>(counts_.size()); }
  std::int64_t total() const { return total_; }

 private:
  std::vector<std::int64_t> counts_;
  std::int64_t total_ = 0;
};

UsageStats codebook_usage(const IndexVec& indices, std::int64_t K);

inline constexpr double kPixelPeak = 2.0;

// 10·log10(peak² / MSE) for pixels in [−1, 1]; +infinity when MSE is 0.
double psnr(const Tensor& x_hat, const Tensor& x);
double psnr_from_mse(double mse);
double mean_squared_error(const Tensor& a, const Tensor& b);

// Mean over codes of the distance to the nearest feature row, divided by the
// mean feature norm.
double distribution_gap(const Tensor& codebook, const Tensor& features);

// Header "source,d0,...,d{D-1}" then one row per code ("code") and feature
// ("feature"), values printed with 9 significant digits.
void export_embeddings_csv(const Tensor& codebook, const Tensor& features,
                           const std::filesystem::path& path);

}  // namespace ibq
