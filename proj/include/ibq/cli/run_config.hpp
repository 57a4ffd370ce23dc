#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ibq/ar/train.hpp"
#include "ibq/data/dataset.hpp"
#include "ibq/tokenizer/train.hpp"

namespace ibq {

inline constexpr const char* kOutputRootEnv = "IBQLAB_OUTPUT_ROOT";

struct DataConfig {
  std::string source = "synthetic";  // synthetic | folder
  std::filesystem::path path;
  int size = 32;
  std::int64_t n = 640;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
};

struct ArRunConfig {
  int d = 0;  // > 0: width 64·d, heads d, depth d
  int width = 128;
  int heads = 2;
  int depth = 2;
  int T = 0;  // 0: taken from the token file
  double dropout = 0.1;
  int epochs = 10;
  int batch = 32;
  double lr = 1e-4;
  double weight_decay = 0.05;
  double eval_fraction = 0.1;
};

struct SampleConfig {
  int n = 16;
  int label = 0;
  double temperature = 1.0;
  int top_k = 0;
};

// INI file read through boost::property_tree. Keys before the first section
// are global; every other key lives in one of data, tokenizer, optim, ar,
// sample, output. Unknown keys and malformed values raise ConfigError.
struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = true;
  DataConfig data;
  TokenizerConfig tokenizer;
  double beta = kDefaultBeta;
  LossWeights weights;
  ReconNorm recon = ReconNorm::l2;
  double lr = kTokenizerBaseLr;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;
  std::vector<double> milestones = {0.8};
  int epochs = 20;
  int batch = 64;
  ArRunConfig ar;
  SampleConfig sample;
  std::filesystem::path output_dir = "runs/default";

  // `overrides` are "section.key=value" strings applied after the file.
  static RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
  static RunConfig parse(const std::string& text, const std::string& origin,
                         const std::vector<std::string>& overrides = {});

  void set(const std::string& key, const std::string& value);
  // With deterministic = false, draws a fresh seed and marks the config
  // deterministic so that the echoed copy replays the same run.
  void resolve_seed();
  void validate() const;
  // Every key with its resolved value, in schema order.
  std::string to_ini() const;

  // output_dir, placed under $IBQLAB_OUTPUT_ROOT when relative and the
  // variable is set.
  std::filesystem::path output() const;
  TokenizerTrainConfig tokenizer_train(const std::filesystem::path& out_dir) const;
  // Vocabulary, length and classes come from the token file unless set.
  ARTrainConfig ar_train(const TokenDataset& tokens, const std::filesystem::path& out_dir) const;
};

// Synthetic or PPM-folder images at data.size. A missing folder is a DataError naming it.
ImageDataset load_images(const DataConfig& cfg);
DatasetSplit load_split(const DataConfig& cfg);

// Writes the resolved config as `resolved.cfg` in dir.
void echo_config(const RunConfig& cfg, const std::filesystem::path& dir);

}  // namespace ibq
