#include "cli.hpp"

int main(int argc, char** argv) { return ghnn::cli_main(argc, argv); }
