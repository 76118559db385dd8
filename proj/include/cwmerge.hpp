#pragma once

#include "cwmerge/cli.hpp"
#include "cwmerge/consistency_weights.hpp"
#include "cwmerge/delta_ops.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/eval_metrics.hpp"
#include "cwmerge/fixture.hpp"
#include "cwmerge/jsonl.hpp"
#include "cwmerge/merge_engine.hpp"
#include "cwmerge/paraphrase.hpp"
#include "cwmerge/records.hpp"
#include "cwmerge/tensor_store.hpp"
#include "cwmerge/toy_model.hpp"
#include "cwmerge/triplet_kit.hpp"
#include "cwmerge/variation_gen.hpp"
#include "cwmerge/version.hpp"
