#pragma once

#include "himpc/adam.hpp"
#include "himpc/autodiff.hpp"
#include "himpc/clustering.hpp"
#include "himpc/config.hpp"
#include "himpc/core.hpp"
#include "himpc/gradcheck.hpp"
#include "himpc/hierarchy.hpp"
#include "himpc/loss.hpp"
#include "himpc/model.hpp"
#include "himpc/reid_eval.hpp"
#include "himpc/skeleton_io.hpp"
#include "himpc/trainer.hpp"
#include "himpc/diagnostics.hpp"
