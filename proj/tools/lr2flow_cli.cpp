#include "lr2flow/cli.hpp"

int main(int argc, char** argv) { return lr2flow::run_cli(argc, argv); }
