#pragma once

#include "common.hpp"
#include "data.hpp"
#include "feedback.hpp"
#include "gradcheck.hpp"
#include "graph.hpp"
#include "model.hpp"
#include "stgc_gru.hpp"
#include "tensor.hpp"
#include "training.hpp"
#include "transformer.hpp"
