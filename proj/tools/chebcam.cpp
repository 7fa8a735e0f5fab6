#include "chebcam/cli.hpp"

int main(int argc, char** argv) { return chebcam::cli::run(argc, argv); }
