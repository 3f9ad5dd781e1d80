#include <iostream>

#include "sglab/cli.hpp"

int main(int argc, char** argv) {
    sglab::cli::tune_allocator();
    return sglab::cli::run(argc, argv, std::cout, std::cerr);
}
