#include "flowscan/cli.hpp"

int main(int argc, char** argv) { return flowscan::cli::run(argc, argv); }
