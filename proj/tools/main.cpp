#include "cli.hpp"

int main(int argc, char** argv) { return svdnas::cli::run({argv + 1, argv + argc}); }
