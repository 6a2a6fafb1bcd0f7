#include "jreg/cli.hpp"

int main(int argc, char** argv) { return jreg::cli::main(argc, argv); }
