#include "mcrcnn/cli.hpp"

int main(int argc, char** argv) { return mcrcnn::run_cli(argc, argv); }
