#include "tdse/cli.hpp"

int main(int argc, char** argv) { return tdse::cli::CmdDispatch(argc, argv); }
