#pragma once

#include "catmerge/conflict.hpp"
#include "catmerge/container.hpp"
#include "catmerge/linalg.hpp"
#include "catmerge/merging.hpp"
#include "catmerge/network.hpp"
#include "catmerge/parallel.hpp"
#include "catmerge/rng.hpp"
#include "catmerge/synthbench.hpp"
#include "catmerge/tensor.hpp"
#include "catmerge/trimming.hpp"

namespace catmerge {
inline constexpr const char* kVersion = "0.1.0";
}
