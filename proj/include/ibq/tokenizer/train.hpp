#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ibq/core/optim.hpp"
#include "ibq/data/archive.hpp"
#include "ibq/data/dataset.hpp"
#include "ibq/data/token_file.hpp"
#include "ibq/metrics/metrics.hpp"
#include "ibq/quant/losses.hpp"
#include "ibq/tokenizer/model.hpp"

namespace ibq {

inline constexpr double kTokenizerBaseLr = 1e-4;
inline constexpr double kLrDecay = 0.01;

// base · 0.01^(number of milestones ≤ step). Throws ConfigError when the
// milestones are not sorted.
double lr_schedule(std::int64_t step, double base, const std::vector<std::int64_t>& milestones);

struct TokenizerTrainConfig {
  TokenizerConfig model;
  int epochs = 20;
  int batch_size = 64;
  double lr = kTokenizerBaseLr;
  // Fractions of the total step count at which the lr drops by 0.01.
  std::vector<double> milestones = {0.8};
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;
  double beta = kDefaultBeta;
  LossWeights weights;
  ReconNorm recon = ReconNorm::l2;
  std::uint64_t seed = 0;
  int log_every = 1;
  // Stop (as if interrupted) after this many epochs; 0 runs to the end.
  int halt_after_epoch = 0;
  std::filesystem::path out_dir;  // empty: no files written
  bool keep_epoch_checkpoints = true;

  void validate() const;
  std::vector<std::int64_t> milestone_steps(std::int64_t total_steps) const;
};

struct TrainState {
  TokenizerModel model;
  OptimState optim;
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs
  std::int64_t csv_rows = 0;
};

TrainState init_train_state(const TokenizerTrainConfig& cfg);

struct StepStats {
  double lr = 0.0;
  double total = 0.0;
  double recon = 0.0;
  double quant = 0.0;
  double entropy = 0.0;
  UsageStats usage;
  double grad_norm = 0.0;
};

// Encode, quantize, decode, assemble losses, backward and one Adam step.
// tau is used by Soft VQ only.
StepStats tokenizer_step(TrainState& state, const Tensor& batch, const TokenizerTrainConfig& cfg,
                         double lr, double tau);

struct EvalStats {
  double total = 0.0;
  double recon = 0.0;
  double quant = 0.0;
  double entropy = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
  UsageStats usage;
};

EvalStats evaluate_tokenizer(const TokenizerModel& model, const ImageDataset& ds, int batch_size,
                             const QuantMode& mode, const TokenizerTrainConfig& cfg);

struct EpochSummary {
  int epoch = 0;
  std::int64_t step = 0;
  double tau = 0.0;
  EvalStats eval;
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::filesystem::path last_checkpoint;
  std::filesystem::path metrics_csv;
};

// Runs from `resume` (a checkpoint written by an earlier call with the same
// config) or from scratch. Throws NumericError naming the last good
// checkpoint when a loss or gradient turns non-finite.
TrainResult train_tokenizer(const TokenizerTrainConfig& cfg, const ImageDataset& train,
                            const ImageDataset& val,
                            const std::optional<std::filesystem::path>& resume = std::nullopt);

double softvq_tau_at(const TokenizerTrainConfig& cfg, std::int64_t step, std::int64_t total_steps);
std::int64_t total_steps(const TokenizerTrainConfig& cfg, std::int64_t train_size);

void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path);
TokenizerModel load_tokenizer(const std::filesystem::path& path);

// Hard indices for every image, raster order.
TokenDataset tokenize_dataset(const TokenizerModel& model, const ImageDataset& ds, int batch_size);

inline const std::vector<std::string> kTokenizerCsvColumns = {
    "step", "epoch", "lr", "loss_total", "loss_recon", "loss_quant",
    "loss_entropy", "usage", "perplexity", "psnr_val"};

}  // namespace ibq
