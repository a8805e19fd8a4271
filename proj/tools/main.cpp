#include <vector>

#include "refgen/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return refgen::dispatch(args);
}
