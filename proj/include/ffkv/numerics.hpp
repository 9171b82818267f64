#pragma once

#include "ffkv/numerics/adam.hpp"
#include "ffkv/numerics/matrix.hpp"
#include "ffkv/numerics/ops.hpp"
#include "ffkv/numerics/probe.hpp"
#include "ffkv/numerics/rng.hpp"
