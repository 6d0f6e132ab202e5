#pragma once

#include <stdexcept>
#include <string>

namespace vconf {

enum class error_kind {
    shape,
    validation,
    degenerate_row,
    missing_capture,
    coverage,
    degenerate_direction,
    degenerate_labels,
    undefined_denominator,
    singular,
    convergence,
    stratification,
    alignment,
    tokenization,
    template_error,
    insufficient_trials,
    parse,
    io,
    config,
    oracle_gap,
};

const char * to_string(error_kind kind);

// Single exception type for the whole library; callers dispatch on kind().
class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string & message)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

    error_kind kind() const noexcept { return kind_; }

private:
    error_kind kind_;
};

// CLI exit code for an error kind: 2 config, 3 data, 4 engine.
int exit_code_for(error_kind kind);

} // namespace vconf
