#pragma once

#include "cmces/rng.hpp"
#include "cmces/workload.hpp"
#include "cmces/cachesim.hpp"
#include "cmces/policy.hpp"
#include "cmces/sampling.hpp"
#include "cmces/meta.hpp"
#include "cmces/harness.hpp"
