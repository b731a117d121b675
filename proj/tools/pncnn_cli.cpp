#include "pncnn/cli.hpp"

int main(int argc, char** argv) { return pncnn::cli_main(argc, argv); }
