#include "knnmoe/cli.hpp"

int main(int argc, char** argv) { return knnmoe::run_cli(argc, argv); }
