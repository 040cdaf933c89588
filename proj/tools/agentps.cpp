// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#include "agentps/cli.hpp"

int main(int argc, char** argv) { return agentps::cli::run(argc, argv); }
