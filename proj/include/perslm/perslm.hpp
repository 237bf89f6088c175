#pragma once

#include "perslm/error.hpp"
#include "perslm/corpus.hpp"
#include "perslm/vocab.hpp"
#include "perslm/ngram.hpp"
#include "perslm/neural.hpp"
#include "perslm/language_model.hpp"
#include "perslm/interp.hpp"
#include "perslm/alphaopt.hpp"
#include "perslm/synth.hpp"
#include "perslm/config.hpp"
#include "perslm/pipeline.hpp"
