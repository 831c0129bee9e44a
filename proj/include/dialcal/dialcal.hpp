#pragma once

#include "dialcal/autograd.hpp"
#include "dialcal/calibrator.hpp"
#include "dialcal/checkpoint.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/knowledge.hpp"
#include "dialcal/metrics.hpp"
#include "dialcal/mmi.hpp"
#include "dialcal/optim.hpp"
#include "dialcal/random.hpp"
#include "dialcal/rollout.hpp"
#include "dialcal/seq2seq.hpp"
#include "dialcal/textrank.hpp"
#include "dialcal/trainer.hpp"
