// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "emofuse/adam.hpp"
#include "emofuse/common.hpp"
#include "emofuse/config.hpp"
#include "emofuse/dataset.hpp"
#include "emofuse/dsp.hpp"
#include "emofuse/grad_check.hpp"
#include "emofuse/gradcheck_suite.hpp"
#include "emofuse/lld.hpp"
#include "emofuse/model.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/pipeline.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/synth.hpp"
#include "emofuse/tape.hpp"
#include "emofuse/tensor.hpp"
#include "emofuse/text.hpp"
#include "emofuse/train.hpp"
#include "emofuse/wav.hpp"
