// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

#include "caood/harness.hpp"

int main(int argc, char** argv) { return caood::run_cli(argc, argv); }
