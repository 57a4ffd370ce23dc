#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ibq::diag {

struct QuantCheckRow {
  std::string quantizer;
  std::string check;
  bool passed = false;
  std::string detail;
};

struct QuantFlow {
  std::string quantizer;
  double row_fraction = 0.0;  // codebook rows with nonzero gradient after one backward
  std::int64_t rows_with_grad = 0;
  std::int64_t rows_selected = 0;
};

struct QuantCheckReport {
  std::vector<QuantCheckRow> rows;
  std::vector<QuantFlow> flow;

  bool passed() const;
  // Fixed-width table, one line per check, then the gradient-row fractions.
  std::string table() const;
};

struct QuantCheckOptions {
  std::uint64_t seed = 0;
  // Negative control: run IBQ with its soft adjoint cut.
  bool corrupt_ibq = false;
  int fd_instances = 10;
};

QuantCheckReport run_quantcheck(const QuantCheckOptions& opts = {});

}  // namespace ibq::diag
