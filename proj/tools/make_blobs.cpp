// Writes a synthetic two-phase blob micrograph as PGM.

#include <iostream>

#include <CLI11.hpp>

#include "volsynth/error.hpp"
#include "volsynth/io.hpp"
#include "volsynth/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a synthetic two-phase blob micrograph"};
  std::size_t size = 128;
  double fraction = 0.3, radius = 4;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--size", size, "Edge length in pixels");
  app.add_option("--fraction", fraction, "Area fraction of phase 1");
  app.add_option("--radius", radius, "Disc radius in pixels");
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--out", out, "Output PGM")->required();
  CLI11_PARSE(app, argc, argv);
  try {
    volsynth::io::write_micrograph(out, volsynth::blob_micrograph(size, fraction, radius, seed));
  } catch (const volsynth::Error& e) {
    std::cerr << e.category() << ": " << e.what() << "\n";
    return volsynth::exit_code_for(e.category());
  }
  return 0;
}
