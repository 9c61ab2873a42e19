#include "medeir/cli.hpp"

int main(int argc, char** argv) { return medeir::cli::dispatch(argc, argv); }
