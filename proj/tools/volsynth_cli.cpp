#include "volsynth/cli.hpp"

int main(int argc, char** argv) { return volsynth::cli::dispatch(argc, argv); }
