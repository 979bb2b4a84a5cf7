#include "cone/cli.hpp"

int main(int argc, char **argv) { return cone::run_cli(argc, argv); }
