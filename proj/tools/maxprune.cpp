// Command-line entry point; see `maxprune --help`.
#include "maxprune/cli.hpp"

int main(int argc, char** argv) { return maxprune::dispatch(argc, argv); }
