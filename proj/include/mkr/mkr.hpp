#pragma once

#include "mkr/tensor.hpp"
#include "mkr/autodiff.hpp"
#include "mkr/units.hpp"
#include "mkr/data.hpp"
#include "mkr/model.hpp"
#include "mkr/eval.hpp"
#include "mkr/training.hpp"
#include "mkr/theory.hpp"
#include "mkr/config.hpp"

namespace mkr {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace mkr
