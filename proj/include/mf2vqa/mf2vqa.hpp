#pragma once

#include "mf2vqa/errors.hpp"
#include "mf2vqa/tensor.hpp"
#include "mf2vqa/ops.hpp"
#include "mf2vqa/random.hpp"
#include "mf2vqa/tnsr.hpp"
#include "mf2vqa/params.hpp"
#include "mf2vqa/grad_check.hpp"
#include "mf2vqa/vision.hpp"
#include "mf2vqa/text.hpp"
#include "mf2vqa/fusion.hpp"
#include "mf2vqa/trace_export.hpp"
#include "mf2vqa/heads.hpp"
#include "mf2vqa/model.hpp"
#include "mf2vqa/model_gradcheck.hpp"
#include "mf2vqa/data.hpp"
#include "mf2vqa/metrics.hpp"
#include "mf2vqa/training.hpp"
