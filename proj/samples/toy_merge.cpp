// Builds a toy scenario in a temporary directory, merges it, and prints the
// per-layer weights and how far the merged net moved from the base.

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include "cwmerge.hpp"
#include "cwmerge/fixture.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cwmerge_sample";
  try {
    const auto paths = cwmerge::toy::write_toy_fixture(dir);
    const auto cfg = cwmerge::MergeConfig::load(paths.merge_config);
    const auto result = cwmerge::run_merge(cfg);

    const auto& lw = result.weights;
    std::cout << std::fixed << std::setprecision(4) << "layer";
    for (const auto& m : lw.models) std::cout << '\t' << m;
    std::cout << '\n';
    for (std::size_t l = 0; l < lw.layer_count(); ++l) {
      std::cout << l;
      for (std::size_t k = 0; k < lw.model_count(); ++k) std::cout << '\t' << lw.weights[k][l];
      std::cout << '\n';
    }

    const auto base = cwmerge::read_container(paths.base);
    double moved = 0.0;
    for (const auto& [name, rec] : result.merged.tensors) {
      const auto& b = base.at(name).data;
      for (std::size_t i = 0; i < b.size(); ++i) moved += std::abs(double(rec.data[i]) - double(b[i]));
    }
    std::cout << "total |merged - base| = " << moved << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
