#include "skelnet/cli.hpp"

int main(int argc, char** argv) { return skelnet::cli::run(argc, argv); }
