#include "oarstd/cli.hpp"

int main(int argc, char** argv) { return oarstd::cli::run(argc, argv); }
