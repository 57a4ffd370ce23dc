#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "ibq/cli/commands.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees large activation buffers every step; keep
  // them in the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> args(argv + 1, argv + argc);
  return ibq::run_cli(args, std::cout, std::cerr);
}
