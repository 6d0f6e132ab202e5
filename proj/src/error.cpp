#include "vconf/error.hpp"

namespace vconf {

const char * to_string(error_kind kind) {
    switch (kind) {
    case error_kind::shape:                 return "shape";
    case error_kind::validation:            return "validation";
    case error_kind::degenerate_row:        return "degenerate-row";
    case error_kind::missing_capture:       return "missing-capture";
    case error_kind::coverage:              return "coverage";
    case error_kind::degenerate_direction:  return "degenerate-direction";
    case error_kind::degenerate_labels:     return "degenerate-labels";
    case error_kind::undefined_denominator: return "undefined-denominator";
    case error_kind::singular:              return "singularity";
    case error_kind::convergence:           return "convergence";
    case error_kind::stratification:        return "stratification";
    case error_kind::alignment:             return "alignment";
    case error_kind::tokenization:          return "tokenization";
    case error_kind::template_error:        return "template";
    case error_kind::insufficient_trials:   return "insufficient-trials";
    case error_kind::parse:                 return "parse";
    case error_kind::io:                    return "io";
    case error_kind::config:                return "config";
    case error_kind::oracle_gap:            return "oracle-gap";
    }
    return "unknown";
}

int exit_code_for(error_kind kind) {
    switch (kind) {
    case error_kind::config:
    case error_kind::template_error:
        return 2;
    case error_kind::tokenization:
    case error_kind::parse:
    case error_kind::io:
    case error_kind::insufficient_trials:
    case error_kind::alignment:
    case error_kind::degenerate_labels:
    case error_kind::stratification:
        return 3;
    default:
        return 4;
    }
}

} // namespace vconf
