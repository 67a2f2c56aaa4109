#include "cli.hpp"

int main(int argc, char** argv) { return nsr::cli::run_cli(argc, argv); }
