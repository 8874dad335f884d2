#pragma once

#include <stdexcept>
#include <string>

namespace mednvc {

// Shape/axis violations (conv channel mismatch, bad matmul dims, ...).
struct dim_error : std::invalid_argument {
    explicit dim_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values or failures inside a training step.
struct train_error : std::runtime_error {
    explicit train_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or truncated checkpoint files.
struct checkpoint_error : std::runtime_error {
    explicit checkpoint_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Manifest/image ingestion problems; message carries the offending line.
struct ingest_error : std::runtime_error {
    explicit ingest_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mednvc
