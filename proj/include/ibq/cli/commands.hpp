#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ibq/cli/run_config.hpp"

namespace ibq {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitNumeric = 2 };

// Parses `args` (without the program name), runs one subcommand and maps
// errors onto the exit-code contract. Summaries go to `out`, errors to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct CompareSummary {
  QuantKind quantizer = QuantKind::ibq;
  EpochSummary last;
  std::filesystem::path checkpoint;
};

struct SoftGap {
  int epoch = 0;
  double tau = 0.0;
  double psnr_soft = 0.0;
  double psnr_hard = 0.0;
};

struct CompareResult {
  std::vector<CompareSummary> runs;
  std::optional<SoftGap> softvq_gap;
  std::filesystem::path csv;
};

// Trains each quantizer in <out>/<name>/ with identical seed, data and
// budget, and writes <out>/compare.csv.
CompareResult compare_quantizers(const RunConfig& cfg, const std::vector<QuantKind>& kinds,
                                 const std::filesystem::path& out, std::ostream& log);

// PSNR of a Soft VQ checkpoint on `val` with soft (training) and hard
// (inference) quantization at the checkpoint's own temperature.
SoftGap softvq_gap(const std::filesystem::path& checkpoint, const RunConfig& cfg, const ImageDataset& val,
                   std::int64_t total_steps);

}  // namespace ibq
