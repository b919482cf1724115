#include "xdvae/cli.hpp"

int main(int argc, char** argv) { return xdvae::run_cli(argc, argv); }
