#include "splitshield/cli.hpp"

int main(int argc, char** argv) { return splitshield::cli::run(argc, argv); }
