#include <iostream>

#include "rl4rec/app/cli.hpp"

int main(int argc, char** argv) { return rl4rec::app::run_cli(argc, argv, std::cout, std::cerr); }
