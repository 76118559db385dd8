#include <string>
#include <vector>

#include "cwmerge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cwmerge::cli::dispatch(std::move(args));
}
