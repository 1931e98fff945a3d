#include "mtl/cli.hpp"

int main(int argc, char** argv) { return mtl::cli_main(argc, argv); }
