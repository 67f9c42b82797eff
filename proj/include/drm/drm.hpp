// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "drm/analysis.hpp"
#include "drm/baselines.hpp"
#include "drm/bundle_io.hpp"
#include "drm/engine.hpp"
#include "drm/error.hpp"
#include "drm/harness.hpp"
#include "drm/linalg.hpp"
#include "drm/merge.hpp"
#include "drm/random.hpp"
