#pragma once

#include "madan/error.hpp"
#include "madan/data.hpp"
#include "madan/io.hpp"
#include "madan/models.hpp"
#include "madan/losses.hpp"
#include "madan/reference.hpp"
#include "madan/eval.hpp"
#include "madan/config.hpp"
#include "madan/checkpoint.hpp"
#include "madan/trainer.hpp"
#include "madan/plot.hpp"
#include "madan/cli.hpp"
