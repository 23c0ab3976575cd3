#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pskv {

// Dimension or layout mismatch between numeric operands.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A softmax/attention row with no finite (unmasked) entry.
struct MaskedRowError : std::domain_error {
    using std::domain_error::domain_error;
};

// Normalizing a zero vector with eps == 0.
struct DivisionByZeroError : std::domain_error {
    using std::domain_error::domain_error;
};

// Token id outside the configured vocabulary.
struct VocabError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Fewer than three vocabulary entries: no distinct non-pad substitute exists.
struct DegenerateVocabError : std::domain_error {
    using std::domain_error::domain_error;
};

// position_base disagrees with the cached history length.
struct PositionError : std::logic_error {
    using std::logic_error::logic_error;
};

// Write past a cache's slot capacity, or an input longer than its grid.
struct CapacityError : std::length_error {
    using std::length_error::length_error;
};

// Empty prompt or target where a real sequence is required.
struct DegenerateInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A target mask that selects no positions.
struct EmptyTargetError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Row/layer index outside a cache view.
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Config file could not be parsed; carries a 1-based line number.
struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, std::size_t line_no)
        : std::runtime_error(msg), line(line_no) {}
    std::size_t line = 0;
};

// Config parsed but violates a constraint; names the offending field.
struct ConfigError : std::runtime_error {
    ConfigError(const std::string& field_name, const std::string& msg)
        : std::runtime_error(field_name + ": " + msg), field(field_name) {}
    std::string field;
};

// A tracked allocation would exceed the configured byte budget. This is the
// deterministic stand-in for running out of device memory; callers report it,
// they do not crash on it.
struct SimulatedOom : std::runtime_error {
    SimulatedOom(const std::string& label_, std::uint64_t requested_,
                 std::uint64_t live_, std::uint64_t budget_)
        : std::runtime_error("simulated OOM: allocating " + std::to_string(requested_) +
                             " bytes for '" + label_ + "' with " + std::to_string(live_) +
                             " live exceeds budget " + std::to_string(budget_)),
          label(label_), requested(requested_), live(live_), budget(budget_) {}
    std::string label;
    std::uint64_t requested = 0;
    std::uint64_t live = 0;
    std::uint64_t budget = 0;
};

}  // namespace pskv
