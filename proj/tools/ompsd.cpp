#include "ompsd/experiments.hpp"

int main(int argc, char** argv) { return ompsd::experiments::cli(argc, argv); }
