#pragma once

#include "econgrasp/core.hpp"
#include "econgrasp/geometry.hpp"
#include "econgrasp/synth.hpp"
#include "econgrasp/economic_labels.hpp"
#include "econgrasp/label_store.hpp"
#include "econgrasp/supervision.hpp"
#include "econgrasp/ambiguity.hpp"
#include "econgrasp/matching.hpp"
#include "econgrasp/focal_head.hpp"
#include "econgrasp/head_check.hpp"
#include "econgrasp/evaluator.hpp"
#include "econgrasp/pipeline.hpp"
