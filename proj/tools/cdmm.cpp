#include "cdmm/cli.hpp"

int main(int argc, char** argv) { return cdmm::dispatch(argc, argv); }
