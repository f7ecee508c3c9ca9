#include "alws/cli.hpp"

int main(int argc, char** argv) { return alws::cli_main(argc, argv); }
