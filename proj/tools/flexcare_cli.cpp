// SPDX-License-Identifier: Apache-2.0
#include "flexcare/cli.hpp"

int main(int argc, char** argv) { return flexcare::cli::run(argc, argv); }
