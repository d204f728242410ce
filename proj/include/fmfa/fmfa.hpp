#pragma once

#include "fmfa/config.hpp"
#include "fmfa/global_align.hpp"
#include "fmfa/gradcheck.hpp"
#include "fmfa/hyperparams.hpp"
#include "fmfa/io.hpp"
#include "fmfa/local_align.hpp"
#include "fmfa/loss_report.hpp"
#include "fmfa/matrix.hpp"
#include "fmfa/numeric.hpp"
#include "fmfa/objectives.hpp"
#include "fmfa/optim.hpp"
#include "fmfa/parallel.hpp"
#include "fmfa/retrieval.hpp"
#include "fmfa/synth.hpp"
#include "fmfa/train.hpp"
#include "fmfa/validation.hpp"
