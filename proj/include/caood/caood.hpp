// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "caood/errors.hpp"
#include "caood/autodiff.hpp"
#include "caood/net.hpp"
#include "caood/mmd.hpp"
#include "caood/oodscore.hpp"
#include "caood/virtual_ood.hpp"
#include "caood/shiftbench.hpp"
#include "caood/mol.hpp"
#include "caood/harness.hpp"
