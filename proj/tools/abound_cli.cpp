#include "abound/cli.hpp"

int main(int argc, char** argv) { return abound::run_command(argc, argv); }
