#pragma once

#include <stdexcept>
#include <string>

namespace mcl {

// Error taxonomy used across the library. Every throw site picks the most
// specific kind so callers and tests can discriminate failure classes.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape disagreement between tensors or between a tensor and an op contract.
struct dim_error : error {
    explicit dim_error(const std::string& msg) : error(msg) {}
};

// Non-finite values, vanishing denominators, domain violations.
struct numeric_error : error {
    explicit numeric_error(const std::string& msg) : error(msg) {}
};

// A precondition of an operation was violated by the caller.
struct contract_error : error {
    explicit contract_error(const std::string& msg) : error(msg) {}
};

// Invalid or inconsistent configuration values.
struct config_error : error {
    explicit config_error(const std::string& msg) : error(msg) {}
};

// Input data cannot satisfy the request (e.g. pool too small).
struct data_error : error {
    explicit data_error(const std::string& msg) : error(msg) {}
};

// Malformed file contents; carries the byte offset of the defect.
struct format_error : error {
    format_error(const std::string& msg, std::size_t offset)
        : error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::size_t byte_offset;
};

// Filesystem/OS failures.
struct io_error : error {
    explicit io_error(const std::string& msg) : error(msg) {}
};

// Bad command line or config-file usage.
struct usage_error : error {
    explicit usage_error(const std::string& msg) : error(msg) {}
};

} // namespace mcl
