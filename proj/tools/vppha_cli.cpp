#include "vppha/cli.hpp"

int main(int argc, char** argv) { return vppha::cli::run(argc, argv); }
