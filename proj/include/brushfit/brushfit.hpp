#pragma once

#include "canvas.hpp"
#include "diff.hpp"
#include "error.hpp"
#include "features.hpp"
#include "geometry.hpp"
#include "init.hpp"
#include "io.hpp"
#include "losses.hpp"
#include "optim.hpp"
#include "parallel.hpp"
#include "renderer.hpp"
