#include "synthcount/cli.hpp"

int main(int argc, char** argv) { return synthcount::cli::run(argc, argv); }
