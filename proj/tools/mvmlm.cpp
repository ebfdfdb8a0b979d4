#include "mvmlm/cli.hpp"

int main(int argc, char** argv) { return mvmlm::run_cli(argc, argv); }
