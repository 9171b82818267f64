#include "ffkv/cli/app.hpp"

int main(int argc, char** argv) { return ffkv::run_cli(argc, argv); }
