#include "modisc/cli.hpp"

int main(int argc, char** argv) { return modisc::cli::run_cli(argc, argv); }
