#include <iostream>

#include "revbd/commands.hpp"

int main(int argc, char** argv) { return revbd::run_cli(argc, argv, std::cout, std::cerr); }
