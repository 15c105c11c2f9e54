#include "kshap/cli.hpp"

int main(int argc, char** argv) { return kshap::run_cli(argc, argv); }
