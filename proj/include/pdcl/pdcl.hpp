#pragma once

#include "pdcl/config.hpp"
#include "pdcl/data.hpp"
#include "pdcl/embedding_space.hpp"
#include "pdcl/eval.hpp"
#include "pdcl/objectives.hpp"
#include "pdcl/perturbation.hpp"
#include "pdcl/prompter.hpp"
#include "pdcl/trainer.hpp"
#include "pdcl/zoo.hpp"
