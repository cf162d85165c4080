#include "xmd/cli.hpp"

int main(int argc, char** argv) { return xmd::run_cli(argc, argv); }
