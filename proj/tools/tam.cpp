#include "tam/cli.hpp"

int main(int argc, char** argv) { return tam::cli::run_cli(argc, argv); }
