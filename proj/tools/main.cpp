#include "cli.hpp"

int main(int argc, char** argv) { return galite::cli::run(argc, argv); }
