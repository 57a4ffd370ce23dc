#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ibq/ar/model.hpp"
#include "ibq/core/optim.hpp"
#include "ibq/data/token_file.hpp"

namespace ibq {

struct ARTrainConfig {
  ARConfig model;
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 5e-2;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  int log_every = 1;
  int halt_after_epoch = 0;
  std::filesystem::path out_dir;

  void validate() const;
};

struct ARTrainState {
  ARModel model;
  OptimState optim;
  std::int64_t step = 0;
  int epoch = 0;
  std::int64_t csv_rows = 0;
};

ARTrainState init_ar_state(const ARTrainConfig& cfg);

struct TokenSplit {
  TokenDataset train;
  TokenDataset eval;
};

// Seeded shuffle; the first round(fraction·N) records (at least one) are held out.
TokenSplit split_tokens(const TokenDataset& ds, double eval_fraction, std::uint64_t seed);

ARBatch make_ar_batch(const TokenDataset& ds, const std::vector<std::int64_t>& idx);

// One AdamW step on the mean NLL; returns the training NLL before the update.
double ar_step(ARTrainState& state, const ARBatch& batch, const ARTrainConfig& cfg);

// Mean NLL over the whole dataset without dropout.
double ar_eval_nll(const ARModel& model, const TokenDataset& ds, int batch_size);

struct AREpoch {
  int epoch = 0;
  std::int64_t step = 0;
  double nll_train = 0.0;  // mean over the epoch's steps
  double nll_eval = 0.0;
};

struct ARTrainResult {
  std::vector<AREpoch> epochs;
  std::filesystem::path last_checkpoint;
  std::filesystem::path metrics_csv;
};

// Throws ConfigError when the token file's vocabulary, length or class
// count disagrees with the model config.
void check_ar_compatible(const ARConfig& cfg, const TokenDataset& ds);

ARTrainResult train_ar(const ARTrainConfig& cfg, const TokenDataset& train, const TokenDataset& eval,
                       const std::optional<std::filesystem::path>& resume = std::nullopt);

void save_ar_state(const std::filesystem::path& path, const ARTrainState& state);
ARTrainState load_ar_state(const std::filesystem::path& path);
ARModel load_ar_model(const std::filesystem::path& path);

inline const std::vector<std::string> kArCsvColumns = {"step", "lr", "nll_train", "nll_eval"};

}  // namespace ibq
