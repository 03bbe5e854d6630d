#include "annofa/cli.hpp"

int main(int argc, char** argv) { return annofa::cli::run(argc, argv); }
