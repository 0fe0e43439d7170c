#include <iostream>

#include "armap_cli.hpp"

int main(int argc, char** argv) { return armap::cli::run(argc, argv, std::cout, std::cerr); }
