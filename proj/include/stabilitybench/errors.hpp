#pragma once

#include <stdexcept>
#include <string>

namespace sb {

// Invalid configuration (bad key, incompatible learner/perturbation pairing,
// schedule out of bounds). Reported before any run starts.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated an operation's contract (mismatched dimensions,
// out-of-order records, mixed configs in one aggregate).
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Corrupt or truncated checkpoint / model blob.
class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// A metric is undefined for the given inputs (too few pre-injection steps,
// recovery rate on a collapsed run, missing latent at injection).
class MetricError : public std::runtime_error {
public:
    explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// Replay found stored artifacts inconsistent with recomputation.
class IntegrityError : public std::runtime_error {
public:
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sb
