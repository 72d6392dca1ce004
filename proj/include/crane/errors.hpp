#pragma once

#include <stdexcept>
#include <string>

namespace crane {

// Error taxonomy used across the library. The CLI maps ConfigError to exit
// code 2 and every other failure to exit code 3.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values (dimensions, budgets, schemas, stochasticity).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Invalid runtime inputs (out-of-range tokens, shape mismatches, unknown ids).
class InputError : public Error {
public:
    using Error::Error;
};

// Malformed serialized artifacts (bad magic, truncation, unparsable lines).
class FormatError : public Error {
public:
    using Error::Error;
};

// Optimization failures (non-finite loss).
class TrainError : public Error {
public:
    using Error::Error;
};

// Relevance propagation failures (non-finite relevance).
class AttributionError : public Error {
public:
    using Error::Error;
};

// Broken internal invariants (e.g. non-stochastic attention rows).
class InternalError : public Error {
public:
    using Error::Error;
};

}  // namespace crane
