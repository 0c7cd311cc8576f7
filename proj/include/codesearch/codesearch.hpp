// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "codesearch/autograd.hpp"
#include "codesearch/checkpoint.hpp"
#include "codesearch/contrastive.hpp"
#include "codesearch/data.hpp"
#include "codesearch/encoder.hpp"
#include "codesearch/error.hpp"
#include "codesearch/grad_check.hpp"
#include "codesearch/index.hpp"
#include "codesearch/metrics.hpp"
#include "codesearch/ops.hpp"
#include "codesearch/optim.hpp"
#include "codesearch/peft.hpp"
#include "codesearch/random.hpp"
#include "codesearch/synthetic.hpp"
#include "codesearch/tensor.hpp"
#include "codesearch/trainer.hpp"
