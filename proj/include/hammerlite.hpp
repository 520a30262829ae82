#pragma once

#include "hammerlite/corpus.hpp"
#include "hammerlite/eval.hpp"
#include "hammerlite/gradcheck.hpp"
#include "hammerlite/model.hpp"
#include "hammerlite/pipeline.hpp"
#include "hammerlite/retrieval.hpp"
#include "hammerlite/synth.hpp"
#include "hammerlite/text.hpp"
#include "hammerlite/training.hpp"
#include "hammerlite/version.hpp"
