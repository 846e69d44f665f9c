#include "dcnseg/cli.hpp"

int main(int argc, char** argv) { return dcnseg::dispatch(argc, argv); }
