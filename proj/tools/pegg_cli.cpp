#include <iostream>

#include "pegg/cli.hpp"

int main(int argc, char** argv) { return pegg::cli::run(argc, argv, std::cout, std::cerr); }
