#include "cli.hpp"

int main(int argc, char** argv) { return pssl::cli::run(argc, argv); }
