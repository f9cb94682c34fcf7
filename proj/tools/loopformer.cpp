#include "loopformer/cli.hpp"

int main(int argc, char** argv) { return loopformer::dispatch(argc, argv); }
