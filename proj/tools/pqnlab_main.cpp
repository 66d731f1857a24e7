#include "pqnlab/harness.hpp"

int main(int argc, char** argv) { return pqnlab::harness_main(argc, argv); }
