#include "t3po/runner.hpp"

int main(int argc, char** argv) { return t3po::run_cli(argc, argv); }
