#include "uniprompt/cli.hpp"

int main(int argc, char** argv) { return uniprompt::dispatch(argc, argv); }
