#include "etk/cli.hpp"

int main(int argc, char** argv) { return etk::cli::run(argc, argv); }
