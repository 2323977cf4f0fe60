#include "cli.hpp"

int main(int argc, char** argv) { return dali::cli::run(argc, argv); }
