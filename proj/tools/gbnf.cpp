#include "gbnf/cli.hpp"

int main(int argc, char** argv) { return gbnf::cli::run(argc, argv); }
